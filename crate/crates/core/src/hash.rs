//! Causal hashing of pipeline edges.
//!
//! Every edge is keyed by a SHA-256 digest computed from the pipeline
//! document alone: argument edges carry a caller-supplied content hash, every
//! other edge hashes the producing step's (input name, input hash) pairs, the
//! canonical identity of its transform logic and the output name. Hashes are
//! therefore known before any resource exists and can key the cache.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::mock::{MockBehavior, MockScript};
use crate::model::{
    ContainerBinding, ContainerFlag, ContainerLogic, DependencyGraph, EdgeId, Pipeline, Resource,
    Step, Transform, TransformLogic,
};

const FILE_TAG: &[u8] = b"file\0";
const DIR_TAG: &[u8] = b"dir\0";
const CAUSAL_TAG: &[u8] = b"causal\0";

/// A 32-byte digest, rendered as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CausalHash([u8; 32]);

impl CausalHash {
    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        CausalHash(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    fn from_digest(d: Sha256) -> Self {
        CausalHash(d.finalize().into())
    }
}

impl fmt::Display for CausalHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for CausalHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CausalHash({})", self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid hash `{0}`: expected 64 hex characters")]
pub struct ParseHashError(pub String);

impl FromStr for CausalHash {
    type Err = ParseHashError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 {
            return Err(ParseHashError(s.to_string()));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| ParseHashError(s.to_string()))?;
        Ok(CausalHash(out))
    }
}

impl Serialize for CausalHash {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for CausalHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error)]
pub enum HashError {
    #[error("{0}: not found")]
    NotFound(PathBuf),
    #[error("{0}: unsupported entry (only regular files and directories are hashed)")]
    UnsupportedEntry(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("duplicate input name `{0}`")]
    DuplicateInputName(String),
    #[error("no hash supplied for argument `{0}`")]
    MissingArgumentHash(String),
    #[error("hash supplied for unknown argument `{0}`")]
    UnknownArgument(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HashError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            HashError::NotFound(path.to_path_buf())
        } else {
            HashError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Content hash of a regular file or a directory tree.
///
/// Directories hash as a Merkle node over their entries in name byte order;
/// symlinks and special files are rejected.
pub fn content_hash_path(path: &Path) -> Result<CausalHash, HashError> {
    let meta = fs::symlink_metadata(path).map_err(io_err(path))?;
    if meta.is_file() {
        let mut file = fs::File::open(path).map_err(io_err(path))?;
        let mut hasher = Sha256::new();
        hasher.update(FILE_TAG);
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            let n = file.read(&mut buf).map_err(io_err(path))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        Ok(CausalHash::from_digest(hasher))
    } else if meta.is_dir() {
        let mut entries = fs::read_dir(path)
            .map_err(io_err(path))?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(io_err(path))?;
        entries.sort_by(|a, b| a.as_encoded_bytes().cmp(b.as_encoded_bytes()));
        let mut hasher = Sha256::new();
        hasher.update(DIR_TAG);
        for name in entries {
            let child = path.join(&name);
            let kind = fs::symlink_metadata(&child).map_err(io_err(&child))?;
            let kind = if kind.is_dir() { b'd' } else { b'f' };
            let digest = content_hash_path(&child)?;
            let name = name.as_encoded_bytes();
            hasher.update((name.len() as u64).to_be_bytes());
            hasher.update(name);
            hasher.update([kind]);
            hasher.update(digest.as_bytes());
        }
        Ok(CausalHash::from_digest(hasher))
    } else {
        Err(HashError::UnsupportedEntry(path.to_path_buf()))
    }
}

/// Canonical, length-prefixed encoder used for transform identities.
#[derive(Default)]
struct Canon {
    buf: Vec<u8>,
}

impl Canon {
    fn len(&mut self, n: usize) {
        self.buf.extend_from_slice(&(n as u64).to_be_bytes());
    }

    fn field(&mut self, number: u32) {
        self.buf.extend_from_slice(&number.to_be_bytes());
    }

    fn str(&mut self, number: u32, s: &str) {
        self.field(number);
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn opt_str(&mut self, number: u32, s: Option<&str>) {
        self.field(number);
        match s {
            None => self.buf.push(0),
            Some(s) => {
                self.buf.push(1);
                self.len(s.len());
                self.buf.extend_from_slice(s.as_bytes());
            }
        }
    }

    fn bool(&mut self, number: u32, b: bool) {
        self.field(number);
        self.len(1);
        self.buf.push(b as u8);
    }

    fn u64(&mut self, number: u32, v: u64) {
        self.field(number);
        self.len(8);
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    fn message(&mut self, number: u32, f: impl FnOnce(&mut Canon)) {
        let mut inner = Canon::default();
        f(&mut inner);
        self.field(number);
        self.len(inner.buf.len());
        self.buf.extend_from_slice(&inner.buf);
    }

    fn list<T>(&mut self, number: u32, items: &[T], mut f: impl FnMut(&mut Canon, &T)) {
        self.field(number);
        self.len(items.len());
        for item in items {
            let mut inner = Canon::default();
            f(&mut inner, item);
            self.len(inner.buf.len());
            self.buf.extend_from_slice(&inner.buf);
        }
    }
}

fn encode_resource(c: &mut Canon, r: &Resource) {
    match r {
        Resource::File(f) => c.message(1, |c| {
            c.bool(1, f.directory);
            c.opt_str(2, f.encoding.as_deref());
            c.opt_str(3, f.format.as_deref());
        }),
        Resource::Service(s) => c.message(2, |c| c.opt_str(1, s.protocol.as_deref())),
    }
}

fn encode_binding(c: &mut Canon, b: &ContainerBinding) {
    c.str(1, &b.name);
    c.opt_str(2, b.flag.as_deref());
    c.opt_str(3, b.env.as_deref());
    c.opt_str(4, b.format.as_deref());
}

fn sorted_flags(flags: &[ContainerFlag]) -> Vec<&ContainerFlag> {
    let mut v: Vec<&ContainerFlag> = flags.iter().collect();
    v.sort_by(|a, b| (&a.name, &a.value).cmp(&(&b.name, &b.value)));
    v
}

fn encode_container(c: &mut Canon, logic: &ContainerLogic) {
    c.str(10, &logic.image);
    c.list(20, &logic.inputs, encode_binding);
    c.list(21, &logic.outputs, encode_binding);
    let encode_flag = |c: &mut Canon, f: &&ContainerFlag| {
        c.str(1, &f.name);
        c.opt_str(2, f.value.as_deref());
    };
    c.list(22, &sorted_flags(&logic.flags), encode_flag);
    c.list(23, &sorted_flags(&logic.env), encode_flag);
}

fn encode_mock(c: &mut Canon, script: &MockScript) {
    c.list(1, &script.behaviors, |c, b| match b {
        MockBehavior::Succeed { outputs, delay_ms } => c.message(1, |c| {
            let pairs: Vec<_> = outputs.iter().collect();
            c.list(1, &pairs, |c, (k, v)| {
                c.str(1, k);
                c.str(2, v);
            });
            c.u64(2, *delay_ms);
        }),
        MockBehavior::Fail { delay_ms } => c.message(2, |c| c.u64(1, *delay_ms)),
        MockBehavior::ServeUntilKilled { readiness_delay_ms } => {
            c.message(3, |c| c.u64(1, *readiness_delay_ms))
        }
    });
}

fn encode_logic(c: &mut Canon, logic: &TransformLogic) {
    match logic {
        TransformLogic::Argument(a) => c.message(100, |c| {
            c.str(1, &a.name);
            c.message(2, |c| encode_resource(c, &a.resource));
        }),
        TransformLogic::Return(r) => c.message(200, |c| {
            c.str(1, &r.name);
            c.message(2, |c| encode_resource(c, &r.resource));
        }),
        TransformLogic::Container(k) => c.message(300, |c| encode_container(c, k)),
        TransformLogic::Subpipeline(s) => c.message(400, |c| {
            c.message(1, |c| encode_pipeline(c, &s.pipeline));
            let args: Vec<_> = s.arguments.iter().collect();
            c.list(2, &args, |c, (k, v)| {
                c.str(1, k);
                c.str(2, v);
            });
            let rets: Vec<_> = s.returns.iter().collect();
            c.list(3, &rets, |c, (k, v)| {
                c.str(1, k);
                c.str(2, v);
            });
        }),
        TransformLogic::Mock(m) => c.message(900, |c| encode_mock(c, m)),
    }
}

fn encode_transform(c: &mut Canon, t: &Transform) {
    let slot = |c: &mut Canon, s: &crate::model::Slot| {
        c.str(1, &s.name);
        c.message(10, |c| encode_resource(c, &s.resource));
    };
    c.list(1, &t.inputs, slot);
    c.list(2, &t.outputs, slot);
    c.message(3, |c| encode_logic(c, &t.logic));
}

fn encode_step(c: &mut Canon, s: &Step) {
    c.str(1, &s.label);
    c.list(2, &s.inputs, |c, i| {
        c.str(1, &i.name);
        c.str(2, &i.provider_step_label);
        c.str(3, &i.provider_output_name);
    });
    c.message(3, |c| encode_transform(c, &s.transform));
}

fn encode_pipeline(c: &mut Canon, p: &Pipeline) {
    c.list(1, &p.steps, encode_step);
}

/// Canonical byte serialization of transform logic.
///
/// Fields appear in schema field-number order and every value is
/// length-prefixed. Container flags and env entries are sorted by name; all
/// other lists keep their declared order.
pub fn transform_identity(logic: &TransformLogic) -> Vec<u8> {
    let mut c = Canon::default();
    encode_logic(&mut c, logic);
    c.buf
}

/// Canonical byte serialization of a whole pipeline.
pub fn pipeline_identity(pipeline: &Pipeline) -> Vec<u8> {
    let mut c = Canon::default();
    encode_pipeline(&mut c, pipeline);
    c.buf
}

fn output_preimage(
    inputs: &[(&str, CausalHash)],
    identity: &[u8],
    output_name: &str,
) -> Result<Vec<u8>, HashError> {
    let mut sorted: Vec<&(&str, CausalHash)> = inputs.iter().collect();
    sorted.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    for pair in sorted.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(HashError::DuplicateInputName(pair[0].0.to_string()));
        }
    }
    let mut pre = Vec::with_capacity(CAUSAL_TAG.len() + 8 + sorted.len() * 48 + identity.len());
    pre.extend_from_slice(CAUSAL_TAG);
    pre.extend_from_slice(&(sorted.len() as u64).to_be_bytes());
    for (name, hash) in sorted {
        pre.extend_from_slice(&(name.len() as u64).to_be_bytes());
        pre.extend_from_slice(name.as_bytes());
        pre.extend_from_slice(hash.as_bytes());
    }
    pre.extend_from_slice(&(identity.len() as u64).to_be_bytes());
    pre.extend_from_slice(identity);
    pre.extend_from_slice(&(output_name.len() as u64).to_be_bytes());
    pre.extend_from_slice(output_name.as_bytes());
    Ok(pre)
}

/// Causal hash of one transform output.
///
/// `inputs` may be given in any order; duplicate names are rejected.
pub fn causal_hash_output(
    inputs: &[(&str, CausalHash)],
    identity: &[u8],
    output_name: &str,
) -> Result<CausalHash, HashError> {
    let pre = output_preimage(inputs, identity, output_name)?;
    Ok(CausalHash::from_digest(Sha256::new_with_prefix(&pre)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub edge: String,
    /// Length of the canonical preimage; zero for caller-supplied hashes.
    pub preimage_len: u64,
    pub hash: CausalHash,
}

/// Per-edge record of how each hash was obtained.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashTrace {
    pub records: Vec<TraceRecord>,
}

/// Causal hashes of every output slot and edge of a pipeline.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PipelineHashes {
    /// `(step label, output name)` to hash, for every declared output slot.
    pub slots: BTreeMap<(String, String), CausalHash>,
    pub edges: BTreeMap<EdgeId, CausalHash>,
    /// For subpipeline steps: the inner pipeline's hashes.
    pub inner: BTreeMap<String, PipelineHashes>,
}

impl PipelineHashes {
    pub fn slot(&self, step: &str, output: &str) -> Option<CausalHash> {
        self.slots
            .get(&(step.to_string(), output.to_string()))
            .copied()
    }

    pub fn edge(&self, id: &EdgeId) -> Option<CausalHash> {
        self.edges.get(id).copied()
    }
}

/// Hashes every edge of a validated graph from the argument hashes alone.
pub fn hash_pipeline(
    graph: &DependencyGraph,
    argument_hashes: &BTreeMap<String, CausalHash>,
) -> Result<(PipelineHashes, HashTrace), HashError> {
    let mut trace = HashTrace::default();
    let hashes = hash_graph(graph, argument_hashes, &mut trace)?;
    Ok((hashes, trace))
}

fn hash_graph(
    graph: &DependencyGraph,
    argument_hashes: &BTreeMap<String, CausalHash>,
    trace: &mut HashTrace,
) -> Result<PipelineHashes, HashError> {
    for name in argument_hashes.keys() {
        if !graph.pipeline().arguments().any(|(_, a)| &a.name == name) {
            return Err(HashError::UnknownArgument(name.clone()));
        }
    }
    let mut out = PipelineHashes::default();
    let mut preimage_lens: BTreeMap<(String, String), u64> = BTreeMap::new();

    for step in graph.ordered_steps() {
        let label = &step.label;
        let input_hashes = || -> Vec<(&str, CausalHash)> {
            step.inputs
                .iter()
                .map(|i| {
                    let h = out
                        .slot(&i.provider_step_label, &i.provider_output_name)
                        .expect("providers are hashed first in topological order");
                    (i.name.as_str(), h)
                })
                .collect()
        };
        match &step.transform.logic {
            TransformLogic::Argument(a) => {
                let h = *argument_hashes
                    .get(&a.name)
                    .ok_or_else(|| HashError::MissingArgumentHash(a.name.clone()))?;
                for o in &step.transform.outputs {
                    out.slots.insert((label.clone(), o.name.clone()), h);
                    preimage_lens.insert((label.clone(), o.name.clone()), 0);
                }
            }
            TransformLogic::Return(_) => {}
            TransformLogic::Subpipeline(sub) => {
                let inputs = input_hashes();
                let by_slot: BTreeMap<&str, CausalHash> = inputs.into_iter().collect();
                let inner_args: BTreeMap<String, CausalHash> = sub
                    .arguments
                    .iter()
                    .map(|(inner, outer)| (inner.clone(), by_slot[outer.as_str()]))
                    .collect();
                let inner_graph = crate::model::build_graph(&sub.pipeline)
                    .expect("subpipeline validated with the outer pipeline");
                let inner = hash_graph(&inner_graph, &inner_args, trace)?;
                for (inner_ret, outer_out) in &sub.returns {
                    let (ret_step, _) = inner_graph
                        .pipeline()
                        .returns()
                        .find(|(_, r)| &r.name == inner_ret)
                        .expect("validated return map");
                    let edge = inner_graph
                        .in_edges(&ret_step.label)
                        .next()
                        .expect("return step has one input");
                    let h = inner.edge(&edge.id).expect("inner edges hashed");
                    out.slots.insert((label.clone(), outer_out.clone()), h);
                    preimage_lens.insert((label.clone(), outer_out.clone()), 0);
                }
                out.inner.insert(label.clone(), inner);
            }
            logic => {
                let inputs = input_hashes();
                let identity = transform_identity(logic);
                for o in &step.transform.outputs {
                    let pre = output_preimage(&inputs, &identity, &o.name)?;
                    let h = CausalHash::from_digest(Sha256::new_with_prefix(&pre));
                    out.slots.insert((label.clone(), o.name.clone()), h);
                    preimage_lens.insert((label.clone(), o.name.clone()), pre.len() as u64);
                }
            }
        }
    }

    for edge in graph.edges() {
        let key = (edge.id.provider.clone(), edge.id.output.clone());
        let h = out.slots[&key];
        out.edges.insert(edge.id.clone(), h);
        trace.records.push(TraceRecord {
            edge: edge.id.to_string(),
            preimage_len: preimage_lens[&key],
            hash: h,
        });
    }
    Ok(out)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn arb_hash() -> impl Strategy<Value = CausalHash> {
        any::<[u8; 32]>().prop_map(CausalHash::from_bytes)
    }

    proptest! {
        #[test]
        fn single_component_change_changes_hash(
            names in prop::collection::btree_set("[a-z]{1,4}", 0..4),
            seed in arb_hash(),
            identity in prop::collection::vec(any::<u8>(), 0..32),
            output in "[a-z]{1,6}",
            which in 0usize..3,
            bit in 0usize..256,
        ) {
            let names: Vec<String> = names.into_iter().collect();
            let inputs: Vec<(&str, CausalHash)> = names
                .iter()
                .enumerate()
                .map(|(i, n)| {
                    let mut b = *seed.as_bytes();
                    b[0] = b[0].wrapping_add(i as u8);
                    (n.as_str(), CausalHash::from_bytes(b))
                })
                .collect();
            let base = causal_hash_output(&inputs, &identity, &output).unwrap();
            prop_assert_eq!(base, causal_hash_output(&inputs, &identity, &output).unwrap());

            let changed = match which {
                0 if !inputs.is_empty() => {
                    let mut v = inputs.clone();
                    let mut b = *v[0].1.as_bytes();
                    b[bit / 8] ^= 1 << (bit % 8);
                    v[0].1 = CausalHash::from_bytes(b);
                    causal_hash_output(&v, &identity, &output).unwrap()
                }
                1 => {
                    let mut id = identity.clone();
                    id.push(0);
                    causal_hash_output(&inputs, &id, &output).unwrap()
                }
                _ => causal_hash_output(&inputs, &identity, &format!("{output}_")).unwrap(),
            };
            prop_assert_ne!(base, changed);
        }
    }
}
