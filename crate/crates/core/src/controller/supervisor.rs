//! Driver and collector loops of one step.

use std::fs;
use std::net::TcpStream;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::board::StepFailure;
use super::subpipeline::{self, SubpipelineProcess};
use super::{dir_name, AttemptReport, CacheOutcome, RunCtx, RunEvent, TerminationKind};
use crate::backend::{
    reserve_port, AttemptContext, Locator, OutputDestinations, ProcessHandle, ResolvedInputs,
    Termination,
};
use crate::cache::LockGuard;
use crate::hash::CausalHash;
use crate::model::TransformLogic;

pub(super) fn spawn(ctx: Arc<RunCtx>, i: usize) -> [JoinHandle<()>; 2] {
    let name = ctx.qualified(&ctx.plans[i].label);
    let driver = {
        let ctx = ctx.clone();
        std::thread::Builder::new()
            .name(format!("drive {name}"))
            .spawn(move || driver(&ctx, i))
            .expect("spawn driver thread")
    };
    let collector = std::thread::Builder::new()
        .name(format!("collect {name}"))
        .spawn(move || collector(&ctx, i))
        .expect("spawn collector thread");
    [driver, collector]
}

enum Outcome {
    /// Outputs were produced (by a process or from the cache).
    Produced,
    /// The process was killed; look again at what is needed.
    Killed,
    Failed,
    /// Not worth retrying.
    Fatal(String),
    /// The run is shutting down.
    Exit,
}

fn driver(ctx: &RunCtx, i: usize) {
    let plan = &ctx.plans[i];
    let config = &ctx.controller.config;
    let mut failures = 0u32;
    let mut attempt = 0u32;
    loop {
        {
            let st = ctx.board.wait_until(|s| {
                s.shutdown
                    || plan
                        .out_edges
                        .iter()
                        .any(|&e| s.edges[e].needed() && !s.edges[e].available())
            });
            if st.shutdown {
                break;
            }
        }
        if failures > 0 {
            let (st, _) = ctx
                .board
                .wait_until_timeout(config.retry_backoff * failures, |s| s.shutdown);
            if st.shutdown {
                break;
            }
        }
        match produce(ctx, i, &mut attempt) {
            Outcome::Produced => failures = 0,
            Outcome::Killed => {}
            Outcome::Failed => {
                failures += 1;
                if config.max_attempts.is_some_and(|max| failures >= max) {
                    let reason = format!("failed {failures} consecutive attempts");
                    fail(ctx, i, reason, true);
                    break;
                }
            }
            Outcome::Fatal(reason) => {
                fail(ctx, i, reason, false);
                break;
            }
            Outcome::Exit => break,
        }
    }
    let inputs = plan.input_edges();
    ctx.board.update(|s| {
        s.set_needed(&inputs, false);
        s.steps[i].driver_done = true;
    });
}

fn fail(ctx: &RunCtx, i: usize, reason: String, exhausted: bool) {
    let step = ctx.plans[i].label.clone();
    ctx.board.update(|s| {
        if s.failure.is_none() {
            s.failure = Some(StepFailure {
                step,
                reason,
                exhausted,
            });
        }
    });
}

fn shutting_down(ctx: &RunCtx) -> bool {
    ctx.board.read(|s| s.shutdown)
}

/// Locks every key in sorted order. `Ok(None)` if the run shut down first.
fn lock_all(ctx: &RunCtx, mut keys: Vec<CausalHash>) -> Result<Option<Vec<LockGuard>>, String> {
    let store = ctx.controller.cache().expect("caller checked the cache");
    keys.sort();
    keys.dedup();
    let mut guards = Vec::with_capacity(keys.len());
    for key in keys {
        let cancelled = || shutting_down(ctx);
        match store.acquire_cancellable(&key, ctx.controller.config.lock_timeout, &cancelled) {
            Ok(Some(g)) => guards.push(g),
            Ok(None) => return Ok(None),
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(Some(guards))
}

/// One pass of the driver: reuse cached outputs or run one attempt.
fn produce(ctx: &RunCtx, i: usize, attempt: &mut u32) -> Outcome {
    let plan = &ctx.plans[i];
    let config = &ctx.controller.config;
    let is_subpipeline = matches!(plan.logic, TransformLogic::Subpipeline(_));
    let keys: Vec<CausalHash> = plan.file_outputs.iter().map(|o| o.hash).collect();

    // Cache fast path. A subpipeline takes no locks while its inner run
    // executes: the inner steps lock the very same keys.
    let mut guards = Vec::new();
    if let Some(store) = ctx.controller.cache().filter(|_| !keys.is_empty()) {
        if !is_subpipeline {
            match lock_all(ctx, keys.clone()) {
                Ok(Some(g)) => guards = g,
                Ok(None) => return Outcome::Exit,
                Err(e) => return Outcome::Fatal(e),
            }
        }
        let mut hits = Vec::new();
        for o in &plan.file_outputs {
            match store.lookup(&o.hash) {
                Ok(entry) => hits.push(entry),
                Err(e) => return Outcome::Fatal(e.to_string()),
            }
        }
        {
            let mut r = ctx.reports[i].lock().unwrap();
            for (o, h) in plan.file_outputs.iter().zip(&hits) {
                let outcome = if h.is_some() {
                    CacheOutcome::Hit
                } else {
                    CacheOutcome::Miss
                };
                r.cache.insert(o.name.clone(), outcome);
            }
        }
        if plan.service_outputs.is_empty() && hits.iter().all(Option::is_some) {
            ctx.board.update(|s| {
                for (o, h) in plan.file_outputs.iter().zip(hits) {
                    let entry = h.expect("all hits");
                    s.set_available(&o.edges, Some(Locator::Path(entry.payload)));
                }
            });
            ctx.reports[i].lock().unwrap().cache_hits += 1;
            ctx.log(RunEvent::CacheHit {
                step: plan.label.clone(),
            });
            return Outcome::Produced;
        }
    }

    // Wait for inputs.
    let in_edges = plan.input_edges();
    ctx.board.update(|s| s.set_needed(&in_edges, true));
    let resolved: ResolvedInputs = {
        let st = ctx
            .board
            .wait_until(|s| s.shutdown || in_edges.iter().all(|&e| s.edges[e].available()));
        if st.shutdown {
            return Outcome::Exit;
        }
        plan.inputs
            .iter()
            .map(|(name, e, _)| {
                let loc = st.edges[*e].locator.clone().expect("available edge has a locator");
                (name.clone(), loc)
            })
            .collect()
    };

    *attempt += 1;
    let n = *attempt;
    let started = Instant::now();
    let dir = ctx.run_dir.join(dir_name(&plan.label)).join(n.to_string());
    let scratch = dir.join("scratch");
    let out_dir = dir.join("outputs");
    for d in [&scratch, &out_dir] {
        if let Err(e) = fs::create_dir_all(d) {
            return Outcome::Fatal(format!("{}: {e}", d.display()));
        }
    }
    let mut dests = OutputDestinations::new();
    for o in &plan.file_outputs {
        dests.insert(o.name.clone(), Locator::Path(out_dir.join(&o.name)));
    }
    for (name, _) in &plan.service_outputs {
        match reserve_port() {
            Ok(addr) => dests.insert(name.clone(), Locator::Endpoint(addr)),
            Err(e) => {
                record(ctx, i, n, started, Termination::Failed(format!("no free port: {e}")), false, None);
                return Outcome::Failed;
            }
        };
    }
    let actx = AttemptContext {
        step: ctx.qualified(&plan.label),
        attempt: n,
        dir,
        scratch,
        inputs: plan.transform.inputs.clone(),
        outputs: plan.transform.outputs.clone(),
        grace: config.kill_grace,
    };

    let started_proc = match &plan.logic {
        TransformLogic::Subpipeline(logic) => subpipeline::start(ctx, plan, &actx, logic, &resolved, &dests)
            .map(|p| (p.clone() as Arc<dyn ProcessHandle>, Some(p))),
        logic => ctx
            .controller
            .backend
            .execute(&actx, logic, &resolved, &dests)
            .map(|h| (Arc::from(h), None)),
    };
    let (handle, sub): (Arc<dyn ProcessHandle>, Option<Arc<SubpipelineProcess>>) = match started_proc {
        Ok(h) => h,
        Err(e) => {
            record_spawn_error(ctx, i, n, started, e.to_string());
            return Outcome::Failed;
        }
    };

    *ctx.handles[i].lock().unwrap() = Some(handle.clone());
    ctx.board.update(|s| {
        s.steps[i].running = true;
        s.steps[i].kill_sent = false;
    });
    ctx.log(RunEvent::Spawned {
        step: plan.label.clone(),
        attempt: n,
    });

    let mut not_ready = None;
    if !plan.service_outputs.is_empty() {
        if config.readiness_probe {
            if let Err(reason) = wait_ready(ctx, i, &dests, handle.as_ref()) {
                handle.kill();
                not_ready = Some(reason);
            }
        }
        if not_ready.is_none() {
            ctx.board.update(|s| {
                for (name, edges) in &plan.service_outputs {
                    s.set_available(edges, Some(dests[name].clone()));
                }
            });
        }
    }

    let termination = handle.wait();
    let service_edges: Vec<usize> = plan.service_edges().collect();
    ctx.board.update(|s| {
        s.steps[i].running = false;
        s.set_unavailable(&service_edges);
    });
    *ctx.handles[i].lock().unwrap() = None;
    let termination = match not_ready {
        Some(reason) => Termination::Failed(reason),
        None => termination,
    };
    let inner = sub.and_then(|s| s.report());

    match termination {
        Termination::Succeeded => {
            let mut produced = Vec::new();
            for o in &plan.file_outputs {
                let src = dests[&o.name].as_path().expect("file destination").to_path_buf();
                let loc = match ctx.controller.cache() {
                    None => src,
                    Some(store) => {
                        let late_guards;
                        let guard = if is_subpipeline {
                            match lock_all(ctx, vec![o.hash]) {
                                Ok(Some(mut g)) => {
                                    late_guards = g.pop().expect("one guard");
                                    &late_guards
                                }
                                Ok(None) => {
                                    record(ctx, i, n, started, Termination::Killed, true, inner);
                                    return Outcome::Exit;
                                }
                                Err(e) => return Outcome::Fatal(e),
                            }
                        } else {
                            guards.iter().find(|g| g.key() == o.hash).expect("lock taken for every output")
                        };
                        match store.publish(guard, &o.hash, &src, o.kind) {
                            Ok(entry) => {
                                ctx.log(RunEvent::Published {
                                    step: plan.label.clone(),
                                    output: o.name.clone(),
                                    hash: o.hash,
                                });
                                entry.payload
                            }
                            Err(e) => {
                                let reason = format!("publishing `{}`: {e}", o.name);
                                record(ctx, i, n, started, Termination::Failed(reason), true, inner);
                                return Outcome::Failed;
                            }
                        }
                    }
                };
                produced.push((o, loc));
            }
            record(ctx, i, n, started, Termination::Succeeded, true, inner);
            ctx.board.update(|s| {
                for (o, loc) in produced {
                    s.set_available(&o.edges, Some(Locator::Path(loc)));
                }
                s.set_needed(&in_edges, false);
            });
            drop(guards);
            Outcome::Produced
        }
        Termination::Failed(reason) => {
            drop(guards);
            record(ctx, i, n, started, Termination::Failed(reason), true, inner);
            Outcome::Failed
        }
        Termination::Killed => {
            ctx.board.update(|s| s.set_needed(&in_edges, false));
            drop(guards);
            record(ctx, i, n, started, Termination::Killed, true, inner);
            Outcome::Killed
        }
    }
}

fn record(
    ctx: &RunCtx,
    i: usize,
    attempt: u32,
    started: Instant,
    termination: Termination,
    spawned: bool,
    inner: Option<super::RunReport>,
) {
    let (kind, reason) = match termination {
        Termination::Succeeded => (TerminationKind::Succeeded, None),
        Termination::Failed(r) => (TerminationKind::Failed, Some(r)),
        Termination::Killed => (TerminationKind::Killed, None),
    };
    push_attempt(ctx, i, attempt, started, kind, reason, spawned, inner);
}

fn record_spawn_error(ctx: &RunCtx, i: usize, attempt: u32, started: Instant, reason: String) {
    push_attempt(ctx, i, attempt, started, TerminationKind::SpawnError, Some(reason), false, None);
}

#[allow(clippy::too_many_arguments)]
fn push_attempt(
    ctx: &RunCtx,
    i: usize,
    attempt: u32,
    started: Instant,
    termination: TerminationKind,
    reason: Option<String>,
    spawned: bool,
    inner: Option<super::RunReport>,
) {
    ctx.log(RunEvent::Terminated {
        step: ctx.plans[i].label.clone(),
        attempt,
        termination,
    });
    ctx.reports[i].lock().unwrap().attempts.push(AttemptReport {
        attempt,
        termination,
        reason,
        spawned,
        wall_ms: started.elapsed().as_millis() as u64,
        inner: inner.map(Box::new),
    });
}

/// Polls service endpoints until they accept connections.
fn wait_ready(
    ctx: &RunCtx,
    i: usize,
    dests: &OutputDestinations,
    handle: &dyn ProcessHandle,
) -> Result<(), String> {
    let plan = &ctx.plans[i];
    let deadline = Instant::now() + ctx.controller.config.readiness_timeout;
    let endpoints: Vec<_> = plan
        .service_outputs
        .iter()
        .filter_map(|(name, _)| dests[name].as_endpoint())
        .collect();
    loop {
        if endpoints
            .iter()
            .all(|a| TcpStream::connect_timeout(a, Duration::from_millis(100)).is_ok())
        {
            return Ok(());
        }
        if let Some(t) = handle.poll() {
            return Err(format!("{} before accepting connections", t.kind()));
        }
        if ctx.board.read(|s| s.shutdown || s.steps[i].kill_sent) {
            return Ok(());
        }
        if Instant::now() >= deadline {
            return Err("service not ready before the readiness timeout".into());
        }
        std::thread::sleep(Duration::from_millis(10));
    }
}

/// Kills the step's process once nothing it provides is still wanted.
fn collector(ctx: &RunCtx, i: usize) {
    let plan = &ctx.plans[i];
    let file_edges: Vec<usize> = plan.file_edges().collect();
    let service_edges: Vec<usize> = plan.service_edges().collect();
    loop {
        let handle = {
            let mut st = ctx.board.wait_until(|s| {
                let step = &s.steps[i];
                step.driver_done
                    || (step.running
                        && !step.kill_sent
                        && file_edges.iter().all(|&e| {
                            let e = &s.edges[e];
                            !e.needed() || e.available()
                        })
                        && service_edges.iter().all(|&e| !s.edges[e].needed()))
            });
            if st.steps[i].driver_done {
                return;
            }
            st.steps[i].kill_sent = true;
            // read under the board lock so a newer attempt cannot slip in
            ctx.handles[i].lock().unwrap().clone()
        };
        if let Some(h) = handle {
            h.kill();
        }
    }
}
