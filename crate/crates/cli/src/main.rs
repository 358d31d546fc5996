//! `koji`: validate, hash, run and inspect pipeline documents.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | structural error in the document (or an unreadable cache entry) |
//! | 2 | type error |
//! | 3 | argument binding error |
//! | 4 | a step failed on every allowed attempt |
//! | 5 | run aborted (SIGINT) |
//! | 6 | run error that retrying cannot fix (store I/O, lock timeout) |
//! | 64 | usage error |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use koji::backend::local::LocalBackend;
use koji::backend::mock::MockBackend;
use koji::backend::Backend;
use koji::cache::CacheStore;
use koji::controller::{Aborter, ArgumentBinding, Controller, RunConfig, RunError, RunStatus};
use koji::document::{
    parse_document, parse_mock_scripts, ArgumentBindingSpec, Format, Strictness,
};
use koji::hash::{hash_pipeline, CausalHash};
use koji::model::{build_graph, validate_document, DependencyGraph, Diagnostic, Pipeline, Severity};
use koji::typecheck::check_pipeline;

const OK: u8 = 0;
const STRUCTURAL: u8 = 1;
const TYPE_ERROR: u8 = 2;
const BINDING: u8 = 3;
const EXHAUSTED: u8 = 4;
const ABORTED: u8 = 5;
const RUN_ERROR: u8 = 6;
const USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "koji", version, about = "Dataflow pipelines with causal-hash caching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a document for structural and type errors.
    Validate {
        doc: PathBuf,
        /// Warn about unknown fields instead of rejecting them.
        #[arg(long)]
        lenient: bool,
    },
    /// Print the causal hash of every edge.
    Hash {
        doc: PathBuf,
        /// Argument binding: name=path[:hash].
        #[arg(long = "arg", value_name = "NAME=PATH[:HASH]")]
        args: Vec<ArgumentBindingSpec>,
        #[arg(long)]
        lenient: bool,
    },
    /// Run a pipeline and deliver its returns.
    Run(RunArgs),
    /// Print the dependency graph in Graphviz DOT.
    Graph {
        doc: PathBuf,
        #[arg(long)]
        lenient: bool,
    },
    /// Inspect or maintain a cache store.
    Cache {
        #[arg(long, env = "KOJI_CACHE")]
        cache: PathBuf,
        #[command(subcommand)]
        op: CacheOp,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    doc: PathBuf,
    #[arg(long = "arg", value_name = "NAME=PATH[:HASH]")]
    args: Vec<ArgumentBindingSpec>,
    /// Directory receiving one entry per return, named after the return.
    #[arg(long)]
    out: PathBuf,
    /// Cache store; defaults to `<out>/.koji/cache`.
    #[arg(long, env = "KOJI_CACHE")]
    cache: Option<PathBuf>,
    #[arg(long)]
    no_cache: bool,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    max_attempts: u32,
    /// Linear retry backoff step in milliseconds.
    #[arg(long, default_value_t = 1000)]
    retry_backoff_ms: u64,
    /// Wait for services to accept connections before consumers start.
    #[arg(long)]
    readiness_probe: bool,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BackendKind::Local)]
    backend: BackendKind,
    /// Per-step behaviours for the mock backend.
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    lenient: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Local,
    Mock,
}

#[derive(Subcommand)]
enum CacheOp {
    /// Number of entries and total payload bytes.
    Stats,
    /// Remove one entry.
    Evict { key: CausalHash },
    /// Re-hash payloads and report corrupt entries.
    Verify { key: Option<CausalHash> },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { OK });
        }
    };
    ExitCode::from(match cli.command {
        Command::Validate { doc, lenient } => validate(&doc, lenient),
        Command::Hash { doc, args, lenient } => hash(&doc, &args, lenient),
        Command::Run(args) => run(args),
        Command::Graph { doc, lenient } => graph(&doc, lenient),
        Command::Cache { cache, op } => cache_op(&cache, op),
    })
}

fn strictness(lenient: bool) -> Strictness {
    if lenient {
        Strictness::Lenient
    } else {
        Strictness::Strict
    }
}

/// Reads, parses and validates a document. Diagnostics go to stderr.
fn load(path: &Path, lenient: bool) -> Result<(Pipeline, DependencyGraph), u8> {
    let text = fs::read_to_string(path).map_err(|e| {
        eprintln!("ERROR: {}: {e}", path.display());
        USAGE
    })?;
    let parsed = parse_document(&text, Format::from_path(path), strictness(lenient)).map_err(|errs| {
        for e in errs {
            eprintln!("ERROR: {}: {e}", path.display());
        }
        STRUCTURAL
    })?;
    for w in &parsed.warnings {
        eprintln!("WARN: {}: {w}", path.display());
    }
    let diags = validate_document(&parsed.pipeline);
    for d in &diags {
        let prefix = match d.severity() {
            Severity::Error => "ERROR",
            Severity::Warning => "WARN",
        };
        eprintln!("{prefix}: {}: {d}", path.display());
    }
    if diags.iter().any(|d| matches!(d, Diagnostic::Error(_))) {
        return Err(STRUCTURAL);
    }
    let graph = build_graph(&parsed.pipeline).map_err(|e| {
        eprintln!("ERROR: {}: {e}", path.display());
        STRUCTURAL
    })?;
    let type_errors = check_pipeline(&graph);
    for t in &type_errors {
        eprintln!("ERROR: {}: {t}", path.display());
    }
    if !type_errors.is_empty() {
        return Err(TYPE_ERROR);
    }
    Ok((parsed.pipeline, graph))
}

fn validate(doc: &Path, lenient: bool) -> u8 {
    match load(doc, lenient) {
        Ok(_) => OK,
        Err(code) => code,
    }
}

fn graph(doc: &Path, lenient: bool) -> u8 {
    match load(doc, lenient) {
        Ok((_, g)) => {
            print!("{}", koji::dot::to_dot(&g));
            OK
        }
        Err(code) => code,
    }
}

/// Resolves `--arg` specs against the pipeline's arguments.
fn bindings(
    pipeline: &Pipeline,
    specs: &[ArgumentBindingSpec],
) -> Result<BTreeMap<String, ArgumentBinding>, u8> {
    let mut by_name = BTreeMap::new();
    for spec in specs {
        if by_name.insert(spec.name.as_str(), spec).is_some() {
            eprintln!("ERROR: argument `{}` bound twice", spec.name);
            return Err(BINDING);
        }
    }
    let mut out = BTreeMap::new();
    for (_, arg) in pipeline.arguments() {
        let Some(spec) = by_name.remove(arg.name.as_str()) else {
            eprintln!("ERROR: missing binding for argument `{}`", arg.name);
            return Err(BINDING);
        };
        let binding = spec.resolve(&arg.resource).map_err(|e| {
            eprintln!("ERROR: {e}");
            BINDING
        })?;
        if spec.hash.is_none() {
            eprintln!("INFO: {}={}:{}", spec.name, spec.value, binding.hash);
        }
        out.insert(arg.name.clone(), binding);
    }
    if let Some(name) = by_name.keys().next() {
        eprintln!("ERROR: pipeline has no argument `{name}`");
        return Err(BINDING);
    }
    Ok(out)
}

fn hash(doc: &Path, specs: &[ArgumentBindingSpec], lenient: bool) -> u8 {
    let (pipeline, graph) = match load(doc, lenient) {
        Ok(x) => x,
        Err(code) => return code,
    };
    let bound = match bindings(&pipeline, specs) {
        Ok(b) => b,
        Err(code) => return code,
    };
    let arg_hashes = bound.into_iter().map(|(k, b)| (k, b.hash)).collect();
    match hash_pipeline(&graph, &arg_hashes) {
        Ok((hashes, _)) => {
            for e in graph.edges() {
                println!("{}  {}", e.id, hashes.edges[&e.id]);
            }
            OK
        }
        Err(e) => {
            eprintln!("ERROR: {e}");
            BINDING
        }
    }
}

fn run(a: RunArgs) -> u8 {
    let (pipeline, _) = match load(&a.doc, a.lenient) {
        Ok(x) => x,
        Err(code) => return code,
    };
    let bound = match bindings(&pipeline, &a.args) {
        Ok(b) => b,
        Err(code) => return code,
    };
    let backend: Arc<dyn Backend> = match (a.backend, &a.mock_script) {
        (BackendKind::Local, None) => Arc::new(LocalBackend::new()),
        (BackendKind::Local, Some(_)) => {
            eprintln!("ERROR: --mock-script requires --backend mock");
            return USAGE;
        }
        (BackendKind::Mock, script) => {
            let scripts = match script {
                None => Default::default(),
                Some(p) => {
                    let parsed = fs::read_to_string(p)
                        .map_err(|e| e.to_string())
                        .and_then(|t| {
                            parse_mock_scripts(&t, Format::from_path(p)).map_err(|e| e.to_string())
                        });
                    match parsed {
                        Ok(s) => s,
                        Err(e) => {
                            eprintln!("ERROR: {}: {e}", p.display());
                            return USAGE;
                        }
                    }
                }
            };
            Arc::new(MockBackend::new(scripts))
        }
    };
    let cache = if a.no_cache {
        None
    } else {
        let root = a
            .cache
            .clone()
            .unwrap_or_else(|| a.out.join(".koji").join("cache"));
        match CacheStore::open(&root) {
            Ok(c) => Some(c),
            Err(e) => {
                eprintln!("ERROR: cache {}: {e}", root.display());
                return RUN_ERROR;
            }
        }
    };
    let config = RunConfig {
        max_attempts: Some(a.max_attempts),
        retry_backoff: Duration::from_millis(a.retry_backoff_ms),
        readiness_probe: a.readiness_probe,
        cache_enabled: cache.is_some(),
        run_dir: a.run_dir.clone(),
        ..Default::default()
    };

    static ABORT: Mutex<Option<Aborter>> = Mutex::new(None);
    let interrupted = Arc::new(std::sync::atomic::AtomicBool::new(false));
    {
        let interrupted = interrupted.clone();
        let _ = ctrlc::set_handler(move || {
            interrupted.store(true, std::sync::atomic::Ordering::SeqCst);
            if let Some(a) = ABORT.lock().unwrap().as_ref() {
                a.abort();
            }
        });
    }

    let controller = Controller::new(backend, cache, config);
    let handle = match controller.start(&pipeline, &bound, &a.out) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("ERROR: {e}");
            return match e {
                RunError::ValidationFailed(_) | RunError::Unsupported { .. } => STRUCTURAL,
                RunError::TypeCheckFailed(_) => TYPE_ERROR,
                RunError::MissingArgument(_)
                | RunError::UnknownArgument(_)
                | RunError::BadArgument { .. }
                | RunError::Hash(_) => BINDING,
                RunError::Io { .. } => RUN_ERROR,
            };
        }
    };
    *ABORT.lock().unwrap() = Some(handle.aborter());
    if interrupted.load(std::sync::atomic::Ordering::SeqCst) {
        handle.abort();
    }
    let report = handle.join();
    ABORT.lock().unwrap().take();

    for step in &report.steps {
        let kinds: Vec<String> = step
            .attempts
            .iter()
            .map(|a| format!("{:?}", a.termination).to_lowercase())
            .collect();
        println!(
            "step {}: executions={} cache_hits={} attempts=[{}]",
            step.label,
            step.executions(),
            step.cache_hits,
            kinds.join(",")
        );
    }
    for r in &report.returns {
        println!("return {}: {}  {}", r.name, r.location, r.hash);
    }
    println!("report: {}", report.run_dir.join("report").display());
    match report.status {
        RunStatus::Delivered => {
            println!("status: delivered");
            OK
        }
        RunStatus::FailedExhausted { step } => {
            eprintln!("ERROR: step `{step}` failed on every attempt");
            EXHAUSTED
        }
        RunStatus::Aborted => {
            eprintln!("ERROR: run aborted");
            ABORTED
        }
        RunStatus::Error { step, message } => {
            eprintln!("ERROR: step `{step}`: {message}");
            RUN_ERROR
        }
    }
}

fn cache_op(root: &Path, op: CacheOp) -> u8 {
    let store = match CacheStore::open(root) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("ERROR: cache {}: {e}", root.display());
            return RUN_ERROR;
        }
    };
    match op {
        CacheOp::Stats => match store.stats() {
            Ok(s) => {
                println!("entries {}", s.entries);
                println!("bytes {}", s.bytes);
                OK
            }
            Err(e) => {
                eprintln!("ERROR: {e}");
                STRUCTURAL
            }
        },
        CacheOp::Evict { key } => {
            let removed = store
                .acquire(&key, Some(Duration::from_secs(30)))
                .and_then(|guard| store.evict(&guard, &key));
            match removed {
                Ok(true) => OK,
                Ok(false) => {
                    eprintln!("ERROR: no entry {key}");
                    STRUCTURAL
                }
                Err(e) => {
                    eprintln!("ERROR: {e}");
                    RUN_ERROR
                }
            }
        }
        CacheOp::Verify { key } => match store.verify(key.as_ref()) {
            Ok(failures) if failures.is_empty() => OK,
            Ok(failures) => {
                for f in failures {
                    eprintln!("ERROR: {}: {}", f.key, f.reason);
                }
                STRUCTURAL
            }
            Err(e) => {
                eprintln!("ERROR: {e}");
                RUN_ERROR
            }
        },
    }
}
