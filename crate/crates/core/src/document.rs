//! YAML and JSON pipeline documents.
//!
//! Keys mirror the field names of the protobuf schema the model is based on,
//! so a document reads like a text-format message:
//!
//! ```yaml
//! steps:
//!   - label: A
//!     transform:
//!       outputs: [{ name: a, resource: { file: { directory: false } } }]
//!       logic: { arg: { name: A, resource: { file: { directory: false } } } }
//! ```
//!
//! `resource` and `logic` are one-of messages: exactly one key must be set.

use std::collections::BTreeMap;
use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::mock::{MockBehavior, MockScript, ScriptMap};
use crate::backend::Locator;
use crate::controller::ArgumentBinding;
use crate::hash::{content_hash_path, CausalHash, HashError};
use crate::model::{
    ArgumentLogic, ContainerBinding, ContainerFlag, ContainerLogic, FileResource, Pipeline,
    Resource, ReturnLogic, ServiceResource, Slot, Step, StepInput, SubpipelineLogic, Transform,
    TransformLogic,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Yaml,
    Json,
    /// JSON if the first non-blank character is `{`, else YAML.
    Auto,
}

impl Format {
    /// Guesses from a file extension, falling back to [`Format::Auto`].
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            Some("yaml" | "yml") => Format::Yaml,
            _ => Format::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Unknown keys are errors.
    #[default]
    Strict,
    /// Unknown keys are reported as warnings and ignored.
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DocumentError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("{path}: {message}")]
    VariantViolation { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDocument {
    pub pipeline: Pipeline,
    /// Unknown fields ignored in lenient mode.
    pub warnings: Vec<String>,
}

pub fn parse_document(
    text: &str,
    format: Format,
    strictness: Strictness,
) -> Result<ParsedDocument, Vec<DocumentError>> {
    let mut unknown = Vec::new();
    let doc: PipelineDoc = deserialize(text, format, &mut unknown).map_err(|e| vec![e])?;
    if strictness == Strictness::Strict && !unknown.is_empty() {
        return Err(unknown.into_iter().map(DocumentError::UnknownField).collect());
    }
    let mut errors = Vec::new();
    let pipeline = doc.into_model("", &mut errors);
    if !errors.is_empty() {
        return Err(errors);
    }
    Ok(ParsedDocument {
        pipeline,
        warnings: unknown
            .into_iter()
            .map(|p| format!("unknown field `{p}` ignored"))
            .collect(),
    })
}

/// Mock scripts: step label to per-attempt behaviours.
pub fn parse_mock_scripts(text: &str, format: Format) -> Result<ScriptMap, DocumentError> {
    let mut unknown = Vec::new();
    let scripts: ScriptDoc = deserialize(text, format, &mut unknown)?;
    match unknown.into_iter().next() {
        Some(p) => Err(DocumentError::UnknownField(p)),
        None => Ok(scripts.0),
    }
}

fn deserialize<T: for<'de> Deserialize<'de>>(
    text: &str,
    format: Format,
    unknown: &mut Vec<String>,
) -> Result<T, DocumentError> {
    let json = match format {
        Format::Json => true,
        Format::Yaml => false,
        Format::Auto => text.trim_start().starts_with('{'),
    };
    let mut track = |p: serde_ignored::Path<'_>| unknown.push(p.to_string());
    if json {
        let mut de = serde_json::Deserializer::from_str(text);
        let v = serde_ignored::deserialize(&mut de, &mut track).map_err(|e| DocumentError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        de.end().map_err(|e| DocumentError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Ok(v)
    } else {
        let de = serde_yaml::Deserializer::from_str(text);
        serde_ignored::deserialize(de, &mut track).map_err(|e: serde_yaml::Error| {
            let (line, column) = e.location().map_or((0, 0), |l| (l.line(), l.column()));
            DocumentError::Syntax {
                line,
                column,
                message: e.to_string(),
            }
        })
    }
}

pub fn to_yaml(pipeline: &Pipeline) -> String {
    serde_yaml::to_string(&PipelineDoc::from_model(pipeline)).expect("document serializes")
}

pub fn to_json(pipeline: &Pipeline) -> String {
    serde_json::to_string_pretty(&PipelineDoc::from_model(pipeline)).expect("document serializes")
}

// Wire types. Field names are part of the document format.

#[derive(Debug, Serialize, Deserialize)]
struct PipelineDoc {
    #[serde(default)]
    steps: Vec<StepDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepDoc {
    label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<StepInputDoc>,
    transform: TransformDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepInputDoc {
    name: String,
    provider_step_label: String,
    provider_output_name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformDoc {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<SlotDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    outputs: Vec<SlotDoc>,
    logic: LogicDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct SlotDoc {
    name: String,
    resource: ResourceDoc,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ResourceDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file: Option<FileDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    service: Option<ServiceDoc>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct FileDoc {
    #[serde(default)]
    directory: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoding: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ServiceDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    protocol: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct LogicDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arg: Option<BoundaryDoc>,
    #[serde(default, rename = "return", skip_serializing_if = "Option::is_none")]
    ret: Option<BoundaryDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    container: Option<ContainerDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subpipeline: Option<SubpipelineDoc>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "serde_yaml::with::singleton_map_recursive"
    )]
    mock: Option<Vec<MockBehavior>>,
}

/// Behaviours are written as single-key maps (`- fail: {}`) in YAML too.
#[derive(Debug, Deserialize)]
#[serde(transparent)]
struct ScriptDoc(#[serde(with = "serde_yaml::with::singleton_map_recursive")] ScriptMap);

#[derive(Debug, Serialize, Deserialize)]
struct BoundaryDoc {
    name: String,
    resource: ResourceDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerDoc {
    image: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<BindingDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    outputs: Vec<BindingDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    flags: Vec<FlagDoc>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    env: Vec<FlagDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BindingDoc {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    flag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FlagDoc {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubpipelineDoc {
    pipeline: PipelineDoc,
    #[serde(default)]
    arguments: BTreeMap<String, String>,
    #[serde(default)]
    returns: BTreeMap<String, String>,
}

impl PipelineDoc {
    fn into_model(self, prefix: &str, errors: &mut Vec<DocumentError>) -> Pipeline {
        let steps = self
            .steps
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.into_model(&format!("{prefix}steps[{i}]"), errors))
            .collect();
        Pipeline { steps }
    }

    fn from_model(p: &Pipeline) -> Self {
        PipelineDoc {
            steps: p.steps.iter().map(StepDoc::from_model).collect(),
        }
    }
}

impl StepDoc {
    fn into_model(self, path: &str, errors: &mut Vec<DocumentError>) -> Step {
        let t = self.transform;
        let slots = |v: Vec<SlotDoc>, kind: &str, errors: &mut Vec<DocumentError>| -> Vec<Slot> {
            v.into_iter()
                .enumerate()
                .map(|(i, s)| {
                    let p = format!("{path}.transform.{kind}[{i}].resource");
                    Slot::new(s.name, s.resource.into_model(&p, errors))
                })
                .collect()
        };
        let inputs = slots(t.inputs, "inputs", errors);
        let outputs = slots(t.outputs, "outputs", errors);
        let logic = t.logic.into_model(&format!("{path}.transform.logic"), errors);
        Step {
            label: self.label,
            inputs: self
                .inputs
                .into_iter()
                .map(|i| StepInput {
                    name: i.name,
                    provider_step_label: i.provider_step_label,
                    provider_output_name: i.provider_output_name,
                })
                .collect(),
            transform: Transform {
                inputs,
                outputs,
                logic,
            },
        }
    }

    fn from_model(s: &Step) -> Self {
        let slots = |v: &[Slot]| {
            v.iter()
                .map(|s| SlotDoc {
                    name: s.name.clone(),
                    resource: ResourceDoc::from_model(&s.resource),
                })
                .collect()
        };
        StepDoc {
            label: s.label.clone(),
            inputs: s
                .inputs
                .iter()
                .map(|i| StepInputDoc {
                    name: i.name.clone(),
                    provider_step_label: i.provider_step_label.clone(),
                    provider_output_name: i.provider_output_name.clone(),
                })
                .collect(),
            transform: TransformDoc {
                inputs: slots(&s.transform.inputs),
                outputs: slots(&s.transform.outputs),
                logic: LogicDoc::from_model(&s.transform.logic),
            },
        }
    }
}

impl ResourceDoc {
    fn into_model(self, path: &str, errors: &mut Vec<DocumentError>) -> Resource {
        match (self.file, self.service) {
            (Some(f), None) => Resource::File(FileResource {
                directory: f.directory,
                encoding: f.encoding,
                format: f.format,
            }),
            (None, Some(s)) => Resource::Service(ServiceResource {
                protocol: s.protocol,
            }),
            _ => {
                errors.push(DocumentError::VariantViolation {
                    path: path.to_string(),
                    message: "exactly one of file/service must be set".into(),
                });
                Resource::file()
            }
        }
    }

    fn from_model(r: &Resource) -> Self {
        match r {
            Resource::File(f) => ResourceDoc {
                file: Some(FileDoc {
                    directory: f.directory,
                    encoding: f.encoding.clone(),
                    format: f.format.clone(),
                }),
                service: None,
            },
            Resource::Service(s) => ResourceDoc {
                file: None,
                service: Some(ServiceDoc {
                    protocol: s.protocol.clone(),
                }),
            },
        }
    }
}

impl LogicDoc {
    fn into_model(self, path: &str, errors: &mut Vec<DocumentError>) -> TransformLogic {
        let set = [
            self.arg.is_some(),
            self.ret.is_some(),
            self.container.is_some(),
            self.subpipeline.is_some(),
            self.mock.is_some(),
        ]
        .iter()
        .filter(|x| **x)
        .count();
        if set != 1 {
            errors.push(DocumentError::VariantViolation {
                path: path.to_string(),
                message: "exactly one of arg/return/container/subpipeline/mock must be set".into(),
            });
            return TransformLogic::Mock(MockScript::default());
        }
        if let Some(a) = self.arg {
            let resource = a.resource.into_model(&format!("{path}.arg.resource"), errors);
            return TransformLogic::Argument(ArgumentLogic {
                name: a.name,
                resource,
            });
        }
        if let Some(r) = self.ret {
            let resource = r.resource.into_model(&format!("{path}.return.resource"), errors);
            return TransformLogic::Return(ReturnLogic {
                name: r.name,
                resource,
            });
        }
        if let Some(c) = self.container {
            let bindings = |v: Vec<BindingDoc>| {
                v.into_iter()
                    .map(|b| ContainerBinding {
                        name: b.name,
                        flag: b.flag,
                        env: b.env,
                        format: b.format,
                    })
                    .collect()
            };
            let flags = |v: Vec<FlagDoc>| {
                v.into_iter()
                    .map(|f| ContainerFlag {
                        name: f.name,
                        value: f.value,
                    })
                    .collect()
            };
            return TransformLogic::Container(ContainerLogic {
                image: c.image,
                inputs: bindings(c.inputs),
                outputs: bindings(c.outputs),
                flags: flags(c.flags),
                env: flags(c.env),
            });
        }
        if let Some(s) = self.subpipeline {
            let pipeline = s
                .pipeline
                .into_model(&format!("{path}.subpipeline.pipeline."), errors);
            return TransformLogic::Subpipeline(SubpipelineLogic {
                pipeline: Box::new(pipeline),
                arguments: s.arguments,
                returns: s.returns,
            });
        }
        TransformLogic::Mock(MockScript {
            behaviors: self.mock.unwrap_or_default(),
        })
    }

    fn from_model(l: &TransformLogic) -> Self {
        let mut doc = LogicDoc::default();
        match l {
            TransformLogic::Argument(a) => {
                doc.arg = Some(BoundaryDoc {
                    name: a.name.clone(),
                    resource: ResourceDoc::from_model(&a.resource),
                })
            }
            TransformLogic::Return(r) => {
                doc.ret = Some(BoundaryDoc {
                    name: r.name.clone(),
                    resource: ResourceDoc::from_model(&r.resource),
                })
            }
            TransformLogic::Container(c) => {
                let bindings = |v: &[ContainerBinding]| {
                    v.iter()
                        .map(|b| BindingDoc {
                            name: b.name.clone(),
                            flag: b.flag.clone(),
                            env: b.env.clone(),
                            format: b.format.clone(),
                        })
                        .collect()
                };
                let flags = |v: &[ContainerFlag]| {
                    v.iter()
                        .map(|f| FlagDoc {
                            name: f.name.clone(),
                            value: f.value.clone(),
                        })
                        .collect()
                };
                doc.container = Some(ContainerDoc {
                    image: c.image.clone(),
                    inputs: bindings(&c.inputs),
                    outputs: bindings(&c.outputs),
                    flags: flags(&c.flags),
                    env: flags(&c.env),
                })
            }
            TransformLogic::Subpipeline(s) => {
                doc.subpipeline = Some(SubpipelineDoc {
                    pipeline: PipelineDoc::from_model(&s.pipeline),
                    arguments: s.arguments.clone(),
                    returns: s.returns.clone(),
                })
            }
            TransformLogic::Mock(m) => doc.mock = Some(m.behaviors.clone()),
        }
        doc
    }
}

/// `name=path[:hash]` from the command line.
///
/// The hash suffix is recognized only when it is 64 hex digits, so paths
/// and `host:port` endpoints containing colons still parse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgumentBindingSpec {
    pub name: String,
    pub value: String,
    pub hash: Option<CausalHash>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BindingSpecError {
    #[error("`{0}`: expected name=path[:hash]")]
    Malformed(String),
    #[error("`{0}`: a hash must be 64 hex digits")]
    BadHash(String),
}

impl FromStr for ArgumentBindingSpec {
    type Err = BindingSpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, rest) = s
            .split_once('=')
            .filter(|(n, r)| !n.is_empty() && !r.is_empty())
            .ok_or_else(|| BindingSpecError::Malformed(s.to_string()))?;
        let (value, hash) = match rest.rsplit_once(':') {
            Some((v, h)) if h.len() == 64 && h.bytes().all(|b| b.is_ascii_hexdigit()) => {
                let hash = h
                    .parse()
                    .map_err(|_| BindingSpecError::BadHash(s.to_string()))?;
                (v, Some(hash))
            }
            // long all-hex tails are mistyped hashes rather than ports
            Some((_, h)) if h.len() > 16 && h.bytes().all(|b| b.is_ascii_hexdigit()) => {
                return Err(BindingSpecError::BadHash(s.to_string()))
            }
            _ => (rest, None),
        };
        if value.is_empty() {
            return Err(BindingSpecError::Malformed(s.to_string()));
        }
        Ok(ArgumentBindingSpec {
            name: name.to_string(),
            value: value.to_string(),
            hash,
        })
    }
}

impl fmt::Display for ArgumentBindingSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.name, self.value)?;
        if let Some(h) = self.hash {
            write!(f, ":{h}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("argument `{name}`: `{value}` is not a host:port endpoint")]
    BadEndpoint { name: String, value: String },
    #[error("argument `{name}`: {source}")]
    Hash { name: String, source: HashError },
}

const ENDPOINT_TAG: &[u8] = b"endpoint\0";

impl ArgumentBindingSpec {
    /// Turns the spec into a binding for an argument of the given resource.
    /// Files without an explicit hash are hashed by content; endpoints by
    /// their address text.
    pub fn resolve(&self, resource: &Resource) -> Result<ArgumentBinding, ResolveError> {
        if resource.is_service() {
            let addr: SocketAddr = self.value.parse().map_err(|_| ResolveError::BadEndpoint {
                name: self.name.clone(),
                value: self.value.clone(),
            })?;
            let hash = self.hash.unwrap_or_else(|| {
                let digest = Sha256::new_with_prefix(ENDPOINT_TAG)
                    .chain_update(addr.to_string().as_bytes())
                    .finalize();
                CausalHash::from_bytes(digest.into())
            });
            return Ok(ArgumentBinding::new(Locator::Endpoint(addr), hash));
        }
        let path = absolute(Path::new(&self.value));
        let hash = match self.hash {
            Some(h) => h,
            None => content_hash_path(&path).map_err(|source| ResolveError::Hash {
                name: self.name.clone(),
                source,
            })?,
        };
        Ok(ArgumentBinding::new(Locator::Path(path), hash))
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::build_graph;

    const MINIMAL: &str = "
steps:
  - label: A
    transform:
      outputs: [{ name: out, resource: { file: {} } }]
      logic: { arg: { name: A, resource: { file: {} } } }
  - label: R
    inputs: [{ name: in, provider_step_label: A, provider_output_name: out }]
    transform:
      inputs: [{ name: in, resource: { file: {} } }]
      logic: { return: { name: R, resource: { file: {} } } }
";

    #[test]
    fn minimal_yaml() {
        let d = parse_document(MINIMAL, Format::Yaml, Strictness::Strict).unwrap();
        assert_eq!(d.pipeline.steps.len(), 2);
        assert_eq!(d.pipeline, fixtures::identity_pipeline("A", "R"));
        assert!(d.warnings.is_empty());
    }

    #[test]
    fn fixture_document() {
        let p = fixtures::ml_insight();
        assert_eq!(p.steps.len(), 6);
        assert_eq!(build_graph(&p).unwrap().edges().len(), 5);
    }

    #[test]
    fn both_file_and_service_is_a_variant_violation() {
        let text = MINIMAL.replacen(
            "outputs: [{ name: out, resource: { file: {} } }]",
            "outputs: [{ name: out, resource: { file: {}, service: {} } }]",
            1,
        );
        let errs = parse_document(&text, Format::Yaml, Strictness::Strict).unwrap_err();
        assert_eq!(
            errs,
            vec![DocumentError::VariantViolation {
                path: "steps[0].transform.outputs[0].resource".into(),
                message: "exactly one of file/service must be set".into(),
            }]
        );
    }

    #[test]
    fn empty_logic_is_a_variant_violation() {
        let text = MINIMAL.replacen("logic: { arg: { name: A, resource: { file: {} } } }", "logic: {}", 1);
        let errs = parse_document(&text, Format::Yaml, Strictness::Strict).unwrap_err();
        assert!(matches!(&errs[0], DocumentError::VariantViolation { path, .. } if path == "steps[0].transform.logic"));
    }

    #[test]
    fn unknown_fields_strict_and_lenient() {
        let text = MINIMAL.replacen("- label: A", "- label: A\n    colour: blue", 1);
        let errs = parse_document(&text, Format::Yaml, Strictness::Strict).unwrap_err();
        assert_eq!(errs, vec![DocumentError::UnknownField("steps.0.colour".into())]);
        let d = parse_document(&text, Format::Yaml, Strictness::Lenient).unwrap();
        assert_eq!(d.warnings.len(), 1);
        assert_eq!(d.pipeline, fixtures::identity_pipeline("A", "R"));
    }

    #[test]
    fn syntax_error_has_position() {
        let err = parse_document("steps:\n  - label: [\n", Format::Yaml, Strictness::Strict).unwrap_err();
        assert!(matches!(err[0], DocumentError::Syntax { line, .. } if line >= 2), "{err:?}");
        let err = parse_document("{\"steps\": [}", Format::Json, Strictness::Strict).unwrap_err();
        assert!(matches!(err[0], DocumentError::Syntax { line: 1, column: 12, .. }), "{err:?}");
    }

    #[test]
    fn json_and_yaml_agree() {
        let p = fixtures::ml_insight();
        let from_json = parse_document(&to_json(&p), Format::Auto, Strictness::Strict).unwrap();
        let from_yaml = parse_document(&to_yaml(&p), Format::Auto, Strictness::Strict).unwrap();
        assert_eq!(from_json.pipeline, p);
        assert_eq!(from_yaml.pipeline, p);
    }

    #[test]
    fn subpipeline_round_trip() {
        let p = fixtures::wrap_ml_insight(fixtures::ml_insight());
        let back = parse_document(&to_yaml(&p), Format::Yaml, Strictness::Strict).unwrap();
        assert_eq!(back.pipeline, p);
    }

    #[test]
    fn mock_scripts_parse() {
        let text = include_str!("../examples/ml-insight.mock.yaml");
        let scripts = parse_mock_scripts(text, Format::Yaml).unwrap();
        assert_eq!(scripts, fixtures::ml_insight_script());
        assert!(parse_mock_scripts("train: [{ explode: {} }]", Format::Yaml).is_err());
    }

    #[test]
    fn binding_specs() {
        let s: ArgumentBindingSpec = "TRAIN=/data/t.csv".parse().unwrap();
        assert_eq!((s.name.as_str(), s.value.as_str(), s.hash), ("TRAIN", "/data/t.csv", None));
        let h = "ab".repeat(32);
        let s: ArgumentBindingSpec = format!("T=/a:b/c:{h}").parse().unwrap();
        assert_eq!(s.value, "/a:b/c");
        assert_eq!(s.hash.unwrap().to_hex(), h);
        assert_eq!(s.to_string(), format!("T=/a:b/c:{h}"));
        let s: ArgumentBindingSpec = "SVC=127.0.0.1:5005".parse().unwrap();
        assert_eq!(s.value, "127.0.0.1:5005");
        assert!("T=/x:abcdefabcdefabcdefabcd".parse::<ArgumentBindingSpec>().is_err());
        assert!("=x".parse::<ArgumentBindingSpec>().is_err());
        assert!("x".parse::<ArgumentBindingSpec>().is_err());
    }

    #[test]
    fn omitted_hash_is_content_hash() {
        let d = tempfile::tempdir().unwrap();
        let f = d.path().join("t");
        std::fs::write(&f, b"rows").unwrap();
        let spec: ArgumentBindingSpec = format!("T={}", f.display()).parse().unwrap();
        let b = spec.resolve(&Resource::file()).unwrap();
        assert_eq!(b.hash, content_hash_path(&f).unwrap());
        let pinned: ArgumentBindingSpec = format!("T={}:{}", f.display(), b.hash).parse().unwrap();
        assert_eq!(pinned.resolve(&Resource::file()).unwrap(), b);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(p in fixtures::arb_pipeline(6)) {
            let yaml = parse_document(&to_yaml(&p), Format::Yaml, Strictness::Strict).unwrap();
            prop_assert_eq!(&yaml.pipeline, &p);
            let json = parse_document(&to_json(&p), Format::Json, Strictness::Strict).unwrap();
            prop_assert_eq!(&json.pipeline, &p);
        }
    }
}
