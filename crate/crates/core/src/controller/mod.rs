//! Runs a pipeline.
//!
//! Every edge gets an availability and a neededness cell on a shared
//! [`board::Board`]. Each intermediate step gets a supervisor made of two
//! threads: a driver that produces outputs someone needs, and a collector
//! that kills the step's process once nobody needs what it provides. The
//! orchestrator only marks argument edges available and return edges
//! needed, then waits for delivery, exhaustion or abort.

pub mod board;
mod report;
mod subpipeline;
mod supervisor;

pub use report::{
    AttemptReport, CacheOutcome, EdgeHash, ReturnReport, RunEvent, RunReport, RunStatus,
    StepReport, TerminationKind,
};

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::backend::{Backend, Locator, ProcessHandle};
use crate::cache::{self, CacheStore, EntryKind};
use crate::hash::{content_hash_path, hash_pipeline, CausalHash, HashError, PipelineHashes};
use crate::model::{
    build_graph, validate_document, Diagnostic, DependencyGraph, GraphError, Pipeline,
    TransformLogic,
};
use crate::typecheck::{check_pipeline, TypeDiagnostic};
use board::Board;

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Attempts per step before the run fails. `None` retries forever.
    pub max_attempts: Option<u32>,
    /// Delay before retry `n` is `n * retry_backoff`.
    pub retry_backoff: Duration,
    /// Wait for service outputs to accept connections before marking them
    /// available.
    pub readiness_probe: bool,
    pub readiness_timeout: Duration,
    pub cache_enabled: bool,
    /// Give up waiting for a cache lock after this long. `None` waits forever.
    pub lock_timeout: Option<Duration>,
    /// Time between the polite and the forceful kill signal.
    pub kill_grace: Duration,
    /// Defaults to `<out>/.koji/runs/<unique>`.
    pub run_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_attempts: Some(3),
            retry_backoff: Duration::from_secs(1),
            readiness_probe: false,
            readiness_timeout: Duration::from_secs(30),
            cache_enabled: true,
            lock_timeout: None,
            kill_grace: Duration::from_secs(5),
            run_dir: None,
        }
    }
}

/// A caller-supplied argument: where it is and its causal hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgumentBinding {
    pub locator: Locator,
    pub hash: CausalHash,
}

impl ArgumentBinding {
    pub fn new(locator: Locator, hash: CausalHash) -> Self {
        ArgumentBinding { locator, hash }
    }

    /// Binds a file or directory by its content hash.
    pub fn from_path(path: impl Into<PathBuf>) -> Result<Self, HashError> {
        let path = path.into();
        let hash = content_hash_path(&path)?;
        Ok(ArgumentBinding {
            locator: Locator::Path(path),
            hash,
        })
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("pipeline is invalid: {}", join(.0))]
    ValidationFailed(Vec<GraphError>),
    #[error("pipeline does not type-check: {}", join(.0))]
    TypeCheckFailed(Vec<TypeDiagnostic>),
    #[error("no binding for argument `{0}`")]
    MissingArgument(String),
    #[error("binding for unknown argument `{0}`")]
    UnknownArgument(String),
    #[error("argument `{name}`: {reason}")]
    BadArgument { name: String, reason: String },
    #[error("step `{step}`: {reason}")]
    Unsupported { step: String, reason: String },
    #[error(transparent)]
    Hash(#[from] HashError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs pipelines against one backend and an optional cache store.
#[derive(Clone)]
pub struct Controller {
    backend: Arc<dyn Backend>,
    cache: Option<CacheStore>,
    config: RunConfig,
}

impl Controller {
    pub fn new(backend: Arc<dyn Backend>, cache: Option<CacheStore>, config: RunConfig) -> Self {
        Controller {
            backend,
            cache,
            config,
        }
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// Runs to completion.
    pub fn run(
        &self,
        pipeline: &Pipeline,
        bindings: &BTreeMap<String, ArgumentBinding>,
        out_dir: &Path,
    ) -> Result<RunReport, RunError> {
        Ok(self.start(pipeline, bindings, out_dir)?.join())
    }

    /// Starts a run in the background. Everything that can be checked
    /// before execution is checked here.
    pub fn start(
        &self,
        pipeline: &Pipeline,
        bindings: &BTreeMap<String, ArgumentBinding>,
        out_dir: &Path,
    ) -> Result<RunHandle, RunError> {
        self.start_scoped(pipeline, bindings, out_dir, "")
    }

    fn start_scoped(
        &self,
        pipeline: &Pipeline,
        bindings: &BTreeMap<String, ArgumentBinding>,
        out_dir: &Path,
        scope: &str,
    ) -> Result<RunHandle, RunError> {
        let started = Instant::now();
        let errors: Vec<GraphError> = validate_document(pipeline)
            .into_iter()
            .filter_map(|d| match d {
                Diagnostic::Error(e) => Some(e),
                Diagnostic::NoReturnSteps => None,
            })
            .collect();
        if !errors.is_empty() {
            return Err(RunError::ValidationFailed(errors));
        }
        let graph = build_graph(pipeline).map_err(|e| RunError::ValidationFailed(vec![e]))?;
        let type_errors = check_pipeline(&graph);
        if !type_errors.is_empty() {
            return Err(RunError::TypeCheckFailed(type_errors));
        }
        for step in &pipeline.steps {
            let sub = matches!(step.transform.logic, TransformLogic::Subpipeline(_));
            if sub && step.transform.outputs.iter().any(|o| o.resource.is_service()) {
                return Err(RunError::Unsupported {
                    step: step.label.clone(),
                    reason: "a subpipeline cannot provide service outputs".into(),
                });
            }
        }
        for (step, arg) in pipeline.arguments() {
            let Some(b) = bindings.get(&arg.name) else {
                return Err(RunError::MissingArgument(arg.name.clone()));
            };
            let ok = match &b.locator {
                Locator::Path(_) => arg.resource.is_file(),
                Locator::Endpoint(_) => arg.resource.is_service(),
            };
            if !ok {
                return Err(RunError::BadArgument {
                    name: arg.name.clone(),
                    reason: format!("step `{}` expects a different resource kind", step.label),
                });
            }
            if let Locator::Path(p) = &b.locator {
                let meta = fs::metadata(p).map_err(|e| RunError::BadArgument {
                    name: arg.name.clone(),
                    reason: format!("{}: {e}", p.display()),
                })?;
                if meta.is_dir() != arg.resource.is_directory() {
                    return Err(RunError::BadArgument {
                        name: arg.name.clone(),
                        reason: format!("{} is not a {}", p.display(), entry_word(arg.resource.is_directory())),
                    });
                }
            }
        }
        if let Some(name) = bindings
            .keys()
            .find(|n| !pipeline.arguments().any(|(_, a)| &a.name == *n))
        {
            return Err(RunError::UnknownArgument(name.clone()));
        }

        let arg_hashes = bindings.iter().map(|(k, b)| (k.clone(), b.hash)).collect();
        let (hashes, _trace) = hash_pipeline(&graph, &arg_hashes)?;

        // processes run in their scratch directory, so every locator handed
        // to them must be absolute
        let out_dir = std::path::absolute(out_dir).map_err(io_at(out_dir))?;
        let run_dir = match &self.config.run_dir {
            Some(d) => d.clone(),
            None => default_run_dir(&out_dir),
        };
        let run_dir = std::path::absolute(&run_dir).map_err(io_at(&run_dir))?;
        fs::create_dir_all(&run_dir).map_err(io_at(&run_dir))?;

        let ctx = Arc::new(RunCtx::new(
            self.clone(),
            graph,
            hashes,
            run_dir,
            out_dir,
            scope.to_string(),
            started,
        ));
        ctx.log(RunEvent::HashesComputed {
            edges: ctx.graph.edges().len(),
        });
        ctx.stage_arguments(bindings)?;

        let thread = {
            let ctx = ctx.clone();
            std::thread::Builder::new()
                .name(format!("run{}", if scope.is_empty() { "" } else { scope }))
                .spawn(move || orchestrate(ctx))
                .map_err(|e| RunError::Io {
                    path: PathBuf::new(),
                    source: e,
                })?
        };
        Ok(RunHandle { ctx, thread })
    }

    fn cache(&self) -> Option<&CacheStore> {
        self.cache.as_ref().filter(|_| self.config.cache_enabled)
    }
}

fn entry_word(directory: bool) -> &'static str {
    if directory {
        "directory"
    } else {
        "file"
    }
}

static RUN_SEQ: AtomicU64 = AtomicU64::new(0);

fn default_run_dir(out_dir: &Path) -> PathBuf {
    let ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    out_dir.join(".koji").join("runs").join(format!(
        "{ms}-{}-{}",
        std::process::id(),
        RUN_SEQ.fetch_add(1, Ordering::Relaxed)
    ))
}

/// A run in progress.
pub struct RunHandle {
    ctx: Arc<RunCtx>,
    thread: JoinHandle<RunReport>,
}

impl RunHandle {
    pub fn run_dir(&self) -> &Path {
        &self.ctx.run_dir
    }

    pub fn abort(&self) {
        self.ctx.abort();
    }

    /// A handle that can abort the run from another thread.
    pub fn aborter(&self) -> Aborter {
        Aborter(self.ctx.clone())
    }

    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }

    /// Waits for the run to finish. Every supervisor has exited by then.
    pub fn join(self) -> RunReport {
        self.thread.join().expect("orchestrator panicked")
    }
}

#[derive(Clone)]
pub struct Aborter(Arc<RunCtx>);

impl Aborter {
    pub fn abort(&self) {
        self.0.abort();
    }
}

/// How a supervised step maps onto board indices.
pub(crate) struct StepPlan {
    pub label: String,
    pub logic: TransformLogic,
    pub transform: crate::model::Transform,
    /// Input name, edge index, edge hash.
    pub inputs: Vec<(String, usize, CausalHash)>,
    pub out_edges: Vec<usize>,
    pub file_outputs: Vec<FileOutput>,
    pub service_outputs: Vec<(String, Vec<usize>)>,
}

pub(crate) struct FileOutput {
    pub name: String,
    pub hash: CausalHash,
    pub kind: EntryKind,
    pub edges: Vec<usize>,
}

impl StepPlan {
    pub fn input_edges(&self) -> Vec<usize> {
        self.inputs.iter().map(|(_, e, _)| *e).collect()
    }

    pub fn file_edges(&self) -> impl Iterator<Item = usize> + '_ {
        self.file_outputs.iter().flat_map(|o| o.edges.iter().copied())
    }

    pub fn service_edges(&self) -> impl Iterator<Item = usize> + '_ {
        self.service_outputs.iter().flat_map(|(_, e)| e.iter().copied())
    }
}

pub(crate) struct RunCtx {
    pub controller: Controller,
    pub graph: DependencyGraph,
    pub hashes: PipelineHashes,
    pub run_dir: PathBuf,
    pub out_dir: PathBuf,
    pub scope: String,
    pub started: Instant,
    pub board: Board,
    pub plans: Vec<StepPlan>,
    /// Process currently running for each plan, shared with its collector.
    pub handles: Vec<Mutex<Option<Arc<dyn ProcessHandle>>>>,
    pub reports: Vec<Mutex<StepReport>>,
    events: Mutex<Vec<RunEvent>>,
    /// Return step label, return name, in-edge index.
    returns: Vec<(String, String, usize)>,
}

impl RunCtx {
    fn new(
        controller: Controller,
        graph: DependencyGraph,
        hashes: PipelineHashes,
        run_dir: PathBuf,
        out_dir: PathBuf,
        scope: String,
        started: Instant,
    ) -> Self {
        let edge_index = |id| {
            graph
                .edges()
                .iter()
                .position(|e| &e.id == id)
                .expect("edge of this graph")
        };
        let mut plans = Vec::new();
        let mut returns = Vec::new();
        for step in graph.ordered_steps() {
            match &step.transform.logic {
                TransformLogic::Argument(_) => continue,
                TransformLogic::Return(r) => {
                    let e = graph.in_edges(&step.label).next().expect("return has an input");
                    returns.push((step.label.clone(), r.name.clone(), edge_index(&e.id)));
                    continue;
                }
                _ => {}
            }
            let inputs = graph
                .in_edges(&step.label)
                .map(|e| (e.id.input.clone(), edge_index(&e.id), hashes.edges[&e.id]))
                .collect();
            let out_edges = graph.out_edges(&step.label).map(|e| edge_index(&e.id)).collect();
            let mut file_outputs = Vec::new();
            let mut service_outputs = Vec::new();
            for slot in &step.transform.outputs {
                let edges: Vec<usize> = graph
                    .out_edges(&step.label)
                    .filter(|e| e.id.output == slot.name)
                    .map(|e| edge_index(&e.id))
                    .collect();
                if slot.resource.is_file() {
                    file_outputs.push(FileOutput {
                        name: slot.name.clone(),
                        hash: hashes.slot(&step.label, &slot.name).expect("slot hashed"),
                        kind: EntryKind::of_directory_flag(slot.resource.is_directory()),
                        edges,
                    });
                } else {
                    service_outputs.push((slot.name.clone(), edges));
                }
            }
            plans.push(StepPlan {
                label: step.label.clone(),
                logic: step.transform.logic.clone(),
                transform: step.transform.clone(),
                inputs,
                out_edges,
                file_outputs,
                service_outputs,
            });
        }
        let board = Board::new(graph.edges().len(), plans.len());
        RunCtx {
            handles: plans.iter().map(|_| Mutex::new(None)).collect(),
            reports: plans
                .iter()
                .map(|p| Mutex::new(StepReport::new(&p.label, p.logic.kind())))
                .collect(),
            controller,
            graph,
            hashes,
            run_dir,
            out_dir,
            scope,
            started,
            board,
            plans,
            events: Mutex::new(Vec::new()),
            returns,
        }
    }

    pub fn log(&self, event: RunEvent) {
        self.events.lock().unwrap().push(event);
    }

    pub fn qualified(&self, label: &str) -> String {
        format!("{}{label}", self.scope)
    }

    fn abort(&self) {
        self.board.update(|s| s.abort_requested = true);
    }

    /// Copies argument payloads into the run directory, read-only, and marks
    /// argument edges available.
    fn stage_arguments(&self, bindings: &BTreeMap<String, ArgumentBinding>) -> Result<(), RunError> {
        let mut ready = Vec::new();
        for (step, arg) in self.graph.pipeline().arguments() {
            let binding = &bindings[&arg.name];
            let locator = match &binding.locator {
                Locator::Path(src) => {
                    let dir = self.run_dir.join(dir_name(&step.label));
                    fs::create_dir_all(&dir).map_err(io_at(&dir))?;
                    let staged = dir.join("staged");
                    cache::copy_tree(src, &staged).map_err(|e| RunError::BadArgument {
                        name: arg.name.clone(),
                        reason: e.to_string(),
                    })?;
                    cache::seal(&staged);
                    Locator::Path(staged)
                }
                endpoint => endpoint.clone(),
            };
            for e in self.graph.out_edges(&step.label) {
                let idx = self
                    .graph
                    .edges()
                    .iter()
                    .position(|x| x.id == e.id)
                    .expect("edge of this graph");
                ready.push((idx, locator.clone()));
            }
        }
        self.board.update(|s| {
            for (idx, loc) in ready {
                s.set_available(&[idx], Some(loc));
            }
        });
        Ok(())
    }
}

/// File-system-safe directory name for a step label.
pub(crate) fn dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c == '/' || c == '\0' { '_' } else { c })
        .collect()
}

fn orchestrate(ctx: Arc<RunCtx>) -> RunReport {
    let return_edges: Vec<usize> = ctx.returns.iter().map(|r| r.2).collect();
    ctx.board.update(|s| s.set_needed(&return_edges, true));

    let mut threads = Vec::new();
    for i in 0..ctx.plans.len() {
        threads.extend(supervisor::spawn(ctx.clone(), i));
    }

    let (delivered, failure, aborted) = {
        let st = ctx.board.wait_until(|s| {
            s.abort_requested
                || s.failure.is_some()
                || return_edges.iter().all(|&e| s.edges[e].available())
        });
        let delivered = return_edges.iter().all(|&e| st.edges[e].available());
        let locators: Vec<Option<Locator>> =
            return_edges.iter().map(|&e| st.edges[e].locator.clone()).collect();
        (
            delivered.then_some(locators),
            st.failure.clone(),
            st.abort_requested,
        )
    };

    let mut returns = Vec::new();
    let mut status = match (&delivered, failure) {
        (Some(_), _) => RunStatus::Delivered,
        (None, Some(f)) if f.exhausted => RunStatus::FailedExhausted { step: f.step },
        (None, Some(f)) => RunStatus::Error {
            step: f.step,
            message: f.reason,
        },
        (None, None) => {
            debug_assert!(aborted);
            RunStatus::Aborted
        }
    };
    if let Some(locators) = delivered {
        for ((label, name, edge), loc) in ctx.returns.iter().zip(locators) {
            let hash = ctx.hashes.edges[&ctx.graph.edges()[*edge].id];
            let location = match loc {
                Some(Locator::Path(src)) => {
                    let dst = ctx.out_dir.join(name);
                    match deliver(&src, &dst) {
                        Ok(()) => dst.display().to_string(),
                        Err(e) => {
                            status = RunStatus::Error {
                                step: label.clone(),
                                message: format!("delivering `{name}`: {e}"),
                            };
                            break;
                        }
                    }
                }
                Some(Locator::Endpoint(a)) => a.to_string(),
                None => String::new(),
            };
            ctx.log(RunEvent::Delivered { name: name.clone() });
            returns.push(ReturnReport {
                name: name.clone(),
                location,
                hash,
            });
        }
    }

    ctx.board.update(|s| {
        s.set_needed(&return_edges, false);
        s.shutdown = true;
    });
    for t in threads {
        let _ = t.join();
    }

    let report = RunReport {
        status,
        run_dir: ctx.run_dir.clone(),
        wall_ms: ctx.started.elapsed().as_millis() as u64,
        steps: ctx.reports.iter().map(|r| r.lock().unwrap().clone()).collect(),
        returns,
        edges: ctx
            .graph
            .edges()
            .iter()
            .map(|e| EdgeHash {
                edge: e.id.to_string(),
                hash: ctx.hashes.edges[&e.id],
            })
            .collect(),
        events: ctx.events.lock().unwrap().clone(),
    };
    let path = ctx.run_dir.join("report");
    if let Ok(bytes) = serde_json::to_vec_pretty(&report) {
        let _ = fs::write(path, bytes);
    }
    report
}

/// Copies a payload to its final place, replacing what was there, and makes
/// the copy writable again.
fn deliver(src: &Path, dst: &Path) -> Result<(), cache::CacheError> {
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent).map_err(|e| cache::CacheError::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    if fs::symlink_metadata(dst).is_ok() {
        cache::remove_tree(dst);
    }
    cache::copy_tree(src, dst)?;
    make_writable(dst);
    Ok(())
}

fn make_writable(path: &Path) {
    let Ok(meta) = fs::symlink_metadata(path) else {
        return;
    };
    let mode = if meta.is_dir() { 0o755 } else { 0o644 };
    let _ = fs::set_permissions(path, fs::Permissions::from_mode(mode));
    if meta.is_dir() {
        if let Ok(entries) = fs::read_dir(path) {
            for e in entries.flatten() {
                make_writable(&e.path());
            }
        }
    }
}
