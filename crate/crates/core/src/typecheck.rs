//! Resource type checking across dependency edges.
//!
//! Every edge must connect a provider output whose resource fulfills the
//! consumer's declared input resource. Identifiers (format, encoding,
//! protocol) are opaque strings; a side that leaves one unset accepts anything.

use std::fmt;

use crate::model::{DependencyGraph, EdgeId, Resource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MismatchKind {
    KindMismatch,
    DirectoryMismatch,
    FormatMismatch,
    EncodingMismatch,
    ProtocolMismatch,
}

impl fmt::Display for MismatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MismatchKind::KindMismatch => "KindMismatch",
            MismatchKind::DirectoryMismatch => "DirectoryMismatch",
            MismatchKind::FormatMismatch => "FormatMismatch",
            MismatchKind::EncodingMismatch => "EncodingMismatch",
            MismatchKind::ProtocolMismatch => "ProtocolMismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeDiagnostic {
    pub edge: EdgeId,
    pub kind: MismatchKind,
    pub provider: String,
    pub consumer: String,
}

impl fmt::Display for TypeDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} on edge {}: provider {} vs consumer {}",
            self.kind, self.edge, self.provider, self.consumer
        )
    }
}

fn describe(r: &Resource) -> String {
    match r {
        Resource::File(f) => {
            let mut s = String::from(if f.directory { "directory" } else { "file" });
            if let Some(fmt) = &f.format {
                s.push_str(&format!(" format={fmt:?}"));
            }
            if let Some(enc) = &f.encoding {
                s.push_str(&format!(" encoding={enc:?}"));
            }
            s
        }
        Resource::Service(svc) => match &svc.protocol {
            Some(p) => format!("service protocol={p:?}"),
            None => "service".into(),
        },
    }
}

fn both_set_and_differ(a: &Option<String>, b: &Option<String>) -> bool {
    matches!((a, b), (Some(x), Some(y)) if x != y)
}

/// Returns the first failing rule, or `None` when `provider` fulfills
/// `consumer`.
pub fn fulfills(provider: &Resource, consumer: &Resource) -> Option<MismatchKind> {
    match (provider, consumer) {
        (Resource::File(p), Resource::File(c)) => {
            if p.directory != c.directory {
                Some(MismatchKind::DirectoryMismatch)
            } else if both_set_and_differ(&p.format, &c.format) {
                Some(MismatchKind::FormatMismatch)
            } else if both_set_and_differ(&p.encoding, &c.encoding) {
                Some(MismatchKind::EncodingMismatch)
            } else {
                None
            }
        }
        (Resource::Service(p), Resource::Service(c)) => {
            both_set_and_differ(&p.protocol, &c.protocol).then_some(MismatchKind::ProtocolMismatch)
        }
        _ => Some(MismatchKind::KindMismatch),
    }
}

/// One diagnostic per ill-typed edge, ordered by consumer topological
/// position and then input name.
pub fn check_pipeline(graph: &DependencyGraph) -> Vec<TypeDiagnostic> {
    let mut edges: Vec<_> = graph.edges().iter().collect();
    edges.sort_by_key(|e| (graph.position(&e.id.consumer), e.id.input.clone()));
    edges
        .into_iter()
        .filter_map(|edge| {
            let consumer = graph
                .step(&edge.id.consumer)?
                .transform
                .input(&edge.id.input)?;
            fulfills(&edge.resource, &consumer.resource).map(|kind| TypeDiagnostic {
                edge: edge.id.clone(),
                kind,
                provider: describe(&edge.resource),
                consumer: describe(&consumer.resource),
            })
        })
        .collect()
}
