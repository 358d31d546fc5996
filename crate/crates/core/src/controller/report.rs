//! Structured outcome of one run.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::hash::CausalHash;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Delivered,
    /// A step failed on every allowed attempt.
    FailedExhausted { step: String },
    Aborted,
    /// A step hit an error that retrying cannot fix (store I/O, lock timeout,
    /// delivery failure).
    Error { step: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationKind {
    Succeeded,
    Failed,
    Killed,
    /// The backend refused to start the process.
    SpawnError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheOutcome {
    Hit,
    Miss,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptReport {
    pub attempt: u32,
    pub termination: TerminationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// False when the backend failed before a process existed.
    pub spawned: bool,
    pub wall_ms: u64,
    /// The inner run, for subpipeline steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner: Option<Box<RunReport>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub label: String,
    pub logic: String,
    pub attempts: Vec<AttemptReport>,
    /// Last cache lookup per file output.
    pub cache: BTreeMap<String, CacheOutcome>,
    /// Times all outputs were served from the cache without a process.
    pub cache_hits: u32,
}

impl StepReport {
    pub fn new(label: &str, logic: &str) -> Self {
        StepReport {
            label: label.to_string(),
            logic: logic.to_string(),
            attempts: Vec::new(),
            cache: BTreeMap::new(),
            cache_hits: 0,
        }
    }

    /// Attempts that started a process.
    pub fn executions(&self) -> usize {
        self.attempts.iter().filter(|a| a.spawned).count()
    }

    pub fn last_termination(&self) -> Option<TerminationKind> {
        self.attempts.last().map(|a| a.termination)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReturnReport {
    pub name: String,
    /// Delivered path, or the endpoint for a service return.
    pub location: String,
    pub hash: CausalHash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeHash {
    pub edge: String,
    pub hash: CausalHash,
}

/// Ordered record of what happened, for auditing the control algorithm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    HashesComputed { edges: usize },
    CacheHit { step: String },
    Spawned { step: String, attempt: u32 },
    Terminated { step: String, attempt: u32, termination: TerminationKind },
    Published { step: String, output: String, hash: CausalHash },
    Delivered { name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: RunStatus,
    pub run_dir: PathBuf,
    pub wall_ms: u64,
    /// Supervised steps in topological order.
    pub steps: Vec<StepReport>,
    pub returns: Vec<ReturnReport>,
    pub edges: Vec<EdgeHash>,
    pub events: Vec<RunEvent>,
}

impl RunReport {
    pub fn is_delivered(&self) -> bool {
        self.status == RunStatus::Delivered
    }

    pub fn step(&self, label: &str) -> Option<&StepReport> {
        self.steps.iter().find(|s| s.label == label)
    }

    /// Processes started for one step of this run (not counting inner runs).
    pub fn executions(&self, label: &str) -> usize {
        self.step(label).map_or(0, StepReport::executions)
    }

    /// Processes started anywhere in this run, inner runs included.
    /// A subpipeline attempt is not itself a process.
    pub fn process_executions(&self) -> usize {
        self.steps
            .iter()
            .flat_map(|s| &s.attempts)
            .map(|a| match &a.inner {
                Some(inner) => inner.process_executions(),
                None => usize::from(a.spawned),
            })
            .sum()
    }

    pub fn return_hash(&self, name: &str) -> Option<CausalHash> {
        self.returns.iter().find(|r| r.name == name).map(|r| r.hash)
    }

    pub fn edge_hash(&self, edge: &str) -> Option<CausalHash> {
        self.edges.iter().find(|e| e.edge == edge).map(|e| e.hash)
    }
}
