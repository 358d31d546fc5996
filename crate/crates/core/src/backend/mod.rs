//! Execution backends.
//!
//! A backend turns a step's transform logic into a running, killable
//! process. The controller only sees [`Backend`] and [`ProcessHandle`];
//! [`local::LocalBackend`] runs executables on this host and
//! [`mock::MockBackend`] plays scripted behaviours for tests.

pub mod local;
pub mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::net::{Ipv4Addr, SocketAddr, TcpListener};
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::model::{ContainerLogic, Slot, TransformLogic};

/// Where a resource can be found: a file path or a service endpoint.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Locator {
    Path(PathBuf),
    Endpoint(SocketAddr),
}

impl Locator {
    pub fn as_path(&self) -> Option<&std::path::Path> {
        match self {
            Locator::Path(p) => Some(p),
            Locator::Endpoint(_) => None,
        }
    }

    pub fn as_endpoint(&self) -> Option<SocketAddr> {
        match self {
            Locator::Endpoint(a) => Some(*a),
            Locator::Path(_) => None,
        }
    }
}

impl fmt::Display for Locator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Locator::Path(p) => write!(f, "{}", p.display()),
            Locator::Endpoint(a) => write!(f, "{a}"),
        }
    }
}

/// Input name to locator.
pub type ResolvedInputs = BTreeMap<String, Locator>;

/// Output name to destination. File outputs get a fresh path in the
/// attempt's scratch area; service outputs get a reserved loopback port.
pub type OutputDestinations = BTreeMap<String, Locator>;

/// Everything a backend needs to know about one attempt besides the logic.
#[derive(Debug, Clone)]
pub struct AttemptContext {
    pub step: String,
    /// 1-based attempt number within the run.
    pub attempt: u32,
    /// `<run-dir>/<step>/<attempt>`; logs are written here.
    pub dir: PathBuf,
    /// Working directory of the process.
    pub scratch: PathBuf,
    pub inputs: Vec<Slot>,
    pub outputs: Vec<Slot>,
    /// Time between the polite and the forceful kill signal.
    pub grace: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Termination {
    Succeeded,
    Failed(String),
    Killed,
}

impl Termination {
    pub fn kind(&self) -> &'static str {
        match self {
            Termination::Succeeded => "succeeded",
            Termination::Failed(_) => "failed",
            Termination::Killed => "killed",
        }
    }
}

/// Control over one started attempt.
///
/// `wait` may block in one thread while `kill` is called from another.
pub trait ProcessHandle: Send + Sync {
    fn id(&self) -> &str;

    /// Blocks until the process ends. Idempotent.
    fn wait(&self) -> Termination;

    /// Non-blocking check: the termination if the process has ended.
    fn poll(&self) -> Option<Termination>;

    /// Requests termination; `wait` then reports `Killed`.
    fn kill(&self);
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("image `{0}` not found")]
    ImageNotFound(String),
    #[error("spawn failed: {0}")]
    SpawnFailure(String),
    #[error("port {0} unavailable")]
    PortUnavailable(SocketAddr),
    #[error("name `{0}` has no locator")]
    UnboundName(String),
    #[error("{backend} backend cannot run `{logic}` logic")]
    Unsupported {
        backend: &'static str,
        logic: &'static str,
    },
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &'static str;

    fn execute(
        &self,
        ctx: &AttemptContext,
        logic: &TransformLogic,
        inputs: &ResolvedInputs,
        outputs: &OutputDestinations,
    ) -> Result<Box<dyn ProcessHandle>, ExecError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Invocation {
    pub argv: Vec<String>,
    pub env: BTreeMap<String, String>,
}

/// Builds the argv and environment for a container logic.
///
/// Inputs, then outputs, then extra flags, each in declared order. A binding
/// with flag `f` appends `--f=<locator>`; an empty flag appends the bare
/// locator. A binding with env `E` sets `E=<locator>`.
pub fn build_invocation(
    logic: &ContainerLogic,
    inputs: &ResolvedInputs,
    outputs: &OutputDestinations,
) -> Result<Invocation, ExecError> {
    let mut inv = Invocation {
        argv: vec![logic.image.clone()],
        env: BTreeMap::new(),
    };
    for (bindings, locators) in [(&logic.inputs, inputs), (&logic.outputs, outputs)] {
        for b in bindings {
            let loc = locators
                .get(&b.name)
                .ok_or_else(|| ExecError::UnboundName(b.name.clone()))?
                .to_string();
            match b.flag.as_deref() {
                Some("") => inv.argv.push(loc.clone()),
                Some(flag) => inv.argv.push(format!("--{flag}={loc}")),
                None => {}
            }
            if let Some(var) = &b.env {
                inv.env.insert(var.clone(), loc);
            }
        }
    }
    for f in &logic.flags {
        inv.argv.push(match &f.value {
            Some(v) => format!("--{}={v}", f.name),
            None => format!("--{}", f.name),
        });
    }
    for e in &logic.env {
        inv.env
            .insert(e.name.clone(), e.value.clone().unwrap_or_default());
    }
    Ok(inv)
}

/// Picks a free loopback port by binding port zero and releasing it.
pub fn reserve_port() -> std::io::Result<SocketAddr> {
    let l = TcpListener::bind((Ipv4Addr::LOCALHOST, 0))?;
    l.local_addr()
}

/// Checks that every declared file output exists with the declared kind.
pub fn verify_outputs(slots: &[Slot], outputs: &OutputDestinations) -> Result<(), String> {
    for slot in slots.iter().filter(|s| s.resource.is_file()) {
        let Some(path) = outputs.get(&slot.name).and_then(Locator::as_path) else {
            return Err(format!("MissingOutput({})", slot.name));
        };
        match fs::symlink_metadata(path) {
            Ok(m) if m.is_dir() == slot.resource.is_directory() && (m.is_dir() || m.is_file()) => {}
            Ok(_) => return Err(format!("WrongOutputKind({})", slot.name)),
            Err(_) => return Err(format!("MissingOutput({})", slot.name)),
        }
    }
    Ok(())
}
