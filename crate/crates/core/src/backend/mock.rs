//! Scripted backend for deterministic tests.
//!
//! Each step plays a list of behaviours, one per attempt; once the list is
//! exhausted the last behaviour repeats. Scripts come either from
//! [`TransformLogic::Mock`] or from a per-label map handed to the backend,
//! so pipelines written for the local backend run unchanged.
//!
//! Mock attempts also police the controller: a consumer checks that its file
//! inputs exist when it starts and that its service inputs accept TCP
//! connections for its whole lifetime. Violations are counted in
//! [`MockStats`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{
    verify_outputs, AttemptContext, Backend, ExecError, Locator, OutputDestinations,
    ProcessHandle, ResolvedInputs, Termination,
};
use crate::model::TransformLogic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MockBehavior {
    /// Writes the given contents to the named file outputs after `delay_ms`.
    /// `${name}` in a content template expands to the contents of file input
    /// `name` (or the locator of a service input).
    Succeed {
        #[serde(default)]
        outputs: BTreeMap<String, String>,
        #[serde(default)]
        delay_ms: u64,
    },
    Fail {
        #[serde(default)]
        delay_ms: u64,
    },
    /// Listens on every service output until killed.
    ServeUntilKilled {
        #[serde(default)]
        readiness_delay_ms: u64,
    },
}

impl MockBehavior {
    pub fn succeed<'a>(outputs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        MockBehavior::Succeed {
            outputs: outputs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            delay_ms: 0,
        }
    }

    pub fn fail() -> Self {
        MockBehavior::Fail { delay_ms: 0 }
    }

    pub fn serve() -> Self {
        MockBehavior::ServeUntilKilled {
            readiness_delay_ms: 0,
        }
    }

    pub fn with_delay(self, ms: u64) -> Self {
        match self {
            MockBehavior::Succeed { outputs, .. } => MockBehavior::Succeed {
                outputs,
                delay_ms: ms,
            },
            MockBehavior::Fail { .. } => MockBehavior::Fail { delay_ms: ms },
            MockBehavior::ServeUntilKilled { .. } => MockBehavior::ServeUntilKilled {
                readiness_delay_ms: ms,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript {
    pub behaviors: Vec<MockBehavior>,
}

/// Wraps a behaviour list as transform logic.
pub fn mock_script(behaviors: Vec<MockBehavior>) -> TransformLogic {
    TransformLogic::Mock(MockScript { behaviors })
}

/// Per-label scripts, as loaded from a mock script document.
pub type ScriptMap = BTreeMap<String, Vec<MockBehavior>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MockStats {
    /// Attempts started.
    pub executions: usize,
    /// Attempts still running.
    pub live: usize,
    /// Attempts started while a file input was missing or a service input
    /// was unreachable.
    pub spawn_violations: usize,
    /// Service inputs that became unreachable while a consumer was running.
    pub reachability_violations: usize,
}

#[derive(Default)]
struct Counters {
    executions: AtomicUsize,
    live: AtomicUsize,
    spawn_violations: AtomicUsize,
    reachability_violations: AtomicUsize,
}

pub struct MockBackend {
    scripts: ScriptMap,
    attempts: Mutex<HashMap<String, usize>>,
    per_step: Mutex<BTreeMap<String, usize>>,
    counters: Arc<Counters>,
    probe_interval: Duration,
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend::new(ScriptMap::new())
    }
}

impl MockBackend {
    pub fn new(scripts: ScriptMap) -> Self {
        MockBackend {
            scripts,
            attempts: Mutex::default(),
            per_step: Mutex::default(),
            counters: Arc::default(),
            probe_interval: Duration::from_millis(2),
        }
    }

    pub fn stats(&self) -> MockStats {
        MockStats {
            executions: self.counters.executions.load(Ordering::SeqCst),
            live: self.counters.live.load(Ordering::SeqCst),
            spawn_violations: self.counters.spawn_violations.load(Ordering::SeqCst),
            reachability_violations: self.counters.reachability_violations.load(Ordering::SeqCst),
        }
    }

    /// Attempts started for a step, keyed as passed in the attempt context.
    pub fn executions_of(&self, step: &str) -> usize {
        self.per_step.lock().unwrap().get(step).copied().unwrap_or(0)
    }

    fn script_for<'a>(&'a self, step: &str, logic: &'a TransformLogic) -> Option<&'a [MockBehavior]> {
        if let TransformLogic::Mock(s) = logic {
            return Some(&s.behaviors);
        }
        self.scripts
            .get(step)
            .or_else(|| step.rsplit('/').next().and_then(|l| self.scripts.get(l)))
            .map(Vec::as_slice)
    }
}

/// A refused connection means nothing listens. Other errors (a dropped
/// handshake under heavy loopback churn) are retried a few times first.
fn reachable(addr: SocketAddr) -> bool {
    for _ in 0..3 {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(250)) {
            Ok(_) => return true,
            Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => return false,
            Err(_) => {}
        }
    }
    false
}

fn expand(template: &str, inputs: &ResolvedInputs) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find('}') {
            Some(end) => {
                let name = &after[..end];
                match inputs.get(name) {
                    Some(Locator::Path(p)) if p.is_file() => {
                        out.push_str(&fs::read_to_string(p).unwrap_or_default())
                    }
                    Some(loc) => out.push_str(&loc.to_string()),
                    None => out.push_str(&rest[start..start + 3 + end]),
                }
                rest = &after[end + 1..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

struct Attempt {
    killed: Mutex<bool>,
    kill_cv: Condvar,
    result: Mutex<Option<Termination>>,
    done_cv: Condvar,
    counters: Arc<Counters>,
}

impl Attempt {
    fn finish(&self, t: Termination) {
        let mut r = self.result.lock().unwrap();
        if r.is_none() {
            *r = Some(t);
            self.counters.live.fetch_sub(1, Ordering::SeqCst);
            self.done_cv.notify_all();
        }
    }

    fn is_killed(&self) -> bool {
        *self.killed.lock().unwrap()
    }

    /// Sleeps up to `d`; returns true if killed meanwhile.
    fn sleep(&self, d: Duration) -> bool {
        let k = self.killed.lock().unwrap();
        let (k, _) = self.kill_cv.wait_timeout_while(k, d, |k| !*k).unwrap();
        *k
    }
}

struct MockHandle {
    id: String,
    attempt: Arc<Attempt>,
}

impl ProcessHandle for MockHandle {
    fn id(&self) -> &str {
        &self.id
    }

    fn wait(&self) -> Termination {
        let mut r = self.attempt.result.lock().unwrap();
        loop {
            if let Some(t) = &*r {
                return t.clone();
            }
            r = self.attempt.done_cv.wait(r).unwrap();
        }
    }

    fn poll(&self) -> Option<Termination> {
        self.attempt.result.lock().unwrap().clone()
    }

    fn kill(&self) {
        let mut k = self.attempt.killed.lock().unwrap();
        *k = true;
        self.attempt.kill_cv.notify_all();
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn execute(
        &self,
        ctx: &AttemptContext,
        logic: &TransformLogic,
        inputs: &ResolvedInputs,
        outputs: &OutputDestinations,
    ) -> Result<Box<dyn ProcessHandle>, ExecError> {
        if matches!(logic, TransformLogic::Argument(_) | TransformLogic::Return(_) | TransformLogic::Subpipeline(_)) {
            return Err(ExecError::Unsupported {
                backend: "mock",
                logic: logic.kind(),
            });
        }
        let behavior = {
            let mut attempts = self.attempts.lock().unwrap();
            let n = attempts.entry(ctx.step.clone()).or_insert(0);
            let i = *n;
            *n += 1;
            self.script_for(&ctx.step, logic)
                .filter(|s| !s.is_empty())
                .map(|s| s[i.min(s.len() - 1)].clone())
        };

        let attempt = Arc::new(Attempt {
            killed: Mutex::new(false),
            kill_cv: Condvar::new(),
            result: Mutex::new(None),
            done_cv: Condvar::new(),
            counters: self.counters.clone(),
        });

        let mut listeners = Vec::new();
        if let Some(MockBehavior::ServeUntilKilled {
            readiness_delay_ms: 0,
        }) = &behavior
        {
            for addr in outputs.values().filter_map(Locator::as_endpoint) {
                let l = TcpListener::bind(addr).map_err(|_| ExecError::PortUnavailable(addr))?;
                l.set_nonblocking(true)
                    .map_err(|e| ExecError::SpawnFailure(e.to_string()))?;
                listeners.push(l);
            }
        }

        self.counters.executions.fetch_add(1, Ordering::SeqCst);
        self.counters.live.fetch_add(1, Ordering::SeqCst);
        *self
            .per_step
            .lock()
            .unwrap()
            .entry(ctx.step.clone())
            .or_insert(0) += 1;

        let spawn_ok = inputs.values().all(|loc| match loc {
            Locator::Path(p) => p.exists(),
            Locator::Endpoint(a) => reachable(*a),
        });
        if !spawn_ok {
            self.counters.spawn_violations.fetch_add(1, Ordering::SeqCst);
        }

        let handle = MockHandle {
            id: format!("mock:{}#{}", ctx.step, ctx.attempt),
            attempt: attempt.clone(),
        };
        let ctx = ctx.clone();
        let inputs = inputs.clone();
        let outputs = outputs.clone();
        let probe = self.probe_interval;
        std::thread::Builder::new()
            .name(format!("mock-{}", ctx.step))
            .spawn(move || {
                let t = if !spawn_ok {
                    Termination::Failed("input not available at start".into())
                } else {
                    match behavior {
                        None => Termination::Failed(format!("no mock script for `{}`", ctx.step)),
                        Some(MockBehavior::Fail { delay_ms }) => {
                            if attempt.sleep(Duration::from_millis(delay_ms)) {
                                Termination::Killed
                            } else {
                                Termination::Failed("scripted failure".into())
                            }
                        }
                        Some(MockBehavior::Succeed {
                            outputs: contents,
                            delay_ms,
                        }) => run_succeed(&attempt, &ctx, &inputs, &outputs, &contents, delay_ms, probe),
                        Some(MockBehavior::ServeUntilKilled { readiness_delay_ms }) => {
                            run_serve(&attempt, &outputs, listeners, readiness_delay_ms)
                        }
                    }
                };
                attempt.finish(t);
            })
            .map_err(|e| ExecError::SpawnFailure(e.to_string()))?;
        Ok(Box::new(handle))
    }
}

fn run_succeed(
    attempt: &Attempt,
    ctx: &AttemptContext,
    inputs: &ResolvedInputs,
    outputs: &OutputDestinations,
    contents: &BTreeMap<String, String>,
    delay_ms: u64,
    probe: Duration,
) -> Termination {
    let services: Vec<(String, SocketAddr)> = inputs
        .iter()
        .filter_map(|(n, l)| l.as_endpoint().map(|a| (n.clone(), a)))
        .collect();
    let check = |attempt: &Attempt| -> Option<Termination> {
        for (name, addr) in &services {
            if !reachable(*addr) {
                if attempt.is_killed() {
                    return Some(Termination::Killed);
                }
                attempt
                    .counters
                    .reachability_violations
                    .fetch_add(1, Ordering::SeqCst);
                return Some(Termination::Failed(format!("service input `{name}` unreachable")));
            }
        }
        None
    };
    let deadline = Instant::now() + Duration::from_millis(delay_ms);
    loop {
        if let Some(t) = check(attempt) {
            return t;
        }
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        let step = if services.is_empty() {
            deadline - now
        } else {
            probe.min(deadline - now)
        };
        if attempt.sleep(step) {
            return Termination::Killed;
        }
    }
    if attempt.is_killed() {
        return Termination::Killed;
    }
    for slot in ctx.outputs.iter().filter(|s| s.resource.is_file()) {
        let (Some(template), Some(Locator::Path(dest))) = (contents.get(&slot.name), outputs.get(&slot.name)) else {
            continue;
        };
        let body = expand(template, inputs);
        let written = if slot.resource.is_directory() {
            fs::create_dir_all(dest).and_then(|_| fs::write(dest.join("data"), &body))
        } else {
            fs::write(dest, &body)
        };
        if let Err(e) = written {
            return Termination::Failed(format!("writing `{}`: {e}", slot.name));
        }
    }
    if let Some(t) = check(attempt) {
        return t;
    }
    match verify_outputs(&ctx.outputs, outputs) {
        Ok(()) => Termination::Succeeded,
        Err(reason) => Termination::Failed(reason),
    }
}

fn run_serve(
    attempt: &Attempt,
    outputs: &OutputDestinations,
    mut listeners: Vec<TcpListener>,
    readiness_delay_ms: u64,
) -> Termination {
    if readiness_delay_ms > 0 {
        if attempt.sleep(Duration::from_millis(readiness_delay_ms)) {
            return Termination::Killed;
        }
        for addr in outputs.values().filter_map(Locator::as_endpoint) {
            match TcpListener::bind(addr) {
                Ok(l) => {
                    let _ = l.set_nonblocking(true);
                    listeners.push(l);
                }
                Err(_) => return Termination::Failed(format!("PortUnavailable({addr})")),
            }
        }
    }
    let stop = AtomicBool::new(false);
    std::thread::scope(|s| {
        s.spawn(|| {
            while !stop.load(Ordering::SeqCst) {
                for l in &listeners {
                    while let Ok((conn, _)) = l.accept() {
                        drop(conn);
                    }
                }
                std::thread::sleep(Duration::from_millis(1));
            }
        });
        let k = attempt.killed.lock().unwrap();
        let _k = attempt.kill_cv.wait_while(k, |k| !*k).unwrap();
        stop.store(true, Ordering::SeqCst);
    });
    drop(listeners);
    Termination::Killed
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::reserve_port;
    use crate::model::{Resource, Slot};

    fn ctx(dir: &std::path::Path, step: &str, outputs: Vec<Slot>) -> AttemptContext {
        AttemptContext {
            step: step.into(),
            attempt: 1,
            dir: dir.to_path_buf(),
            scratch: dir.join("scratch"),
            inputs: vec![],
            outputs,
            grace: Duration::from_secs(1),
        }
    }

    #[test]
    fn default_probes_at_the_normal_interval() {
        assert_eq!(MockBackend::default().probe_interval, Duration::from_millis(2));
    }

    #[test]
    fn succeed_writes_outputs() {
        let d = tempfile::tempdir().unwrap();
        let out = d.path().join("o");
        let b = MockBackend::default();
        let logic = mock_script(vec![MockBehavior::succeed([("o", "x")])]);
        let outs = BTreeMap::from([("o".to_string(), Locator::Path(out.clone()))]);
        let h = b
            .execute(&ctx(d.path(), "s", vec![Slot::new("o", Resource::file())]), &logic, &BTreeMap::new(), &outs)
            .unwrap();
        assert_eq!(h.wait(), Termination::Succeeded);
        assert_eq!(fs::read_to_string(out).unwrap(), "x");
        assert_eq!(b.stats().live, 0);
    }

    #[test]
    fn fail_behavior() {
        let d = tempfile::tempdir().unwrap();
        let b = MockBackend::default();
        let h = b
            .execute(&ctx(d.path(), "s", vec![]), &mock_script(vec![MockBehavior::fail()]), &BTreeMap::new(), &BTreeMap::new())
            .unwrap();
        assert!(matches!(h.wait(), Termination::Failed(_)));
    }

    #[test]
    fn attempts_advance_then_repeat_last() {
        let d = tempfile::tempdir().unwrap();
        let b = MockBackend::default();
        let logic = mock_script(vec![MockBehavior::fail(), MockBehavior::succeed([])]);
        let run = || {
            b.execute(&ctx(d.path(), "s", vec![]), &logic, &BTreeMap::new(), &BTreeMap::new())
                .unwrap()
                .wait()
        };
        assert!(matches!(run(), Termination::Failed(_)));
        assert_eq!(run(), Termination::Succeeded);
        assert_eq!(run(), Termination::Succeeded);
        assert_eq!(b.executions_of("s"), 3);
    }

    #[test]
    fn omitted_output_is_missing() {
        let d = tempfile::tempdir().unwrap();
        let b = MockBackend::default();
        let slots = vec![Slot::new("a", Resource::file()), Slot::new("b", Resource::file())];
        let outs = BTreeMap::from([
            ("a".to_string(), Locator::Path(d.path().join("a"))),
            ("b".to_string(), Locator::Path(d.path().join("b"))),
        ]);
        let logic = mock_script(vec![MockBehavior::succeed([("a", "1")])]);
        let h = b.execute(&ctx(d.path(), "s", slots), &logic, &BTreeMap::new(), &outs).unwrap();
        assert!(matches!(h.wait(), Termination::Failed(r) if r == "MissingOutput(b)"));
    }

    #[test]
    fn serve_until_killed() {
        let d = tempfile::tempdir().unwrap();
        let b = MockBackend::default();
        let addr = reserve_port().unwrap();
        let outs = BTreeMap::from([("svc".to_string(), Locator::Endpoint(addr))]);
        let slots = vec![Slot::new("svc", Resource::service())];
        let h = b
            .execute(&ctx(d.path(), "s", slots), &mock_script(vec![MockBehavior::serve()]), &BTreeMap::new(), &outs)
            .unwrap();
        assert!(reachable(addr));
        h.kill();
        assert_eq!(h.wait(), Termination::Killed);
        assert!(!reachable(addr));
        assert_eq!(b.stats().live, 0);
    }

    #[test]
    fn script_map_by_label_and_templates() {
        let d = tempfile::tempdir().unwrap();
        let input = d.path().join("in");
        fs::write(&input, "DATA").unwrap();
        let scripts = ScriptMap::from([(
            "train".to_string(),
            vec![MockBehavior::succeed([("model", "model(${train})")])],
        )]);
        let b = MockBackend::new(scripts);
        let out = d.path().join("model");
        let outs = BTreeMap::from([("model".to_string(), Locator::Path(out.clone()))]);
        let ins = BTreeMap::from([("train".to_string(), Locator::Path(input))]);
        let logic = TransformLogic::Container(Default::default());
        let h = b
            .execute(&ctx(d.path(), "outer/train", vec![Slot::new("model", Resource::file())]), &logic, &ins, &outs)
            .unwrap();
        assert_eq!(h.wait(), Termination::Succeeded);
        assert_eq!(fs::read_to_string(out).unwrap(), "model(DATA)");
    }

    #[test]
    fn missing_input_at_spawn_is_a_violation() {
        let d = tempfile::tempdir().unwrap();
        let b = MockBackend::default();
        let ins = BTreeMap::from([("i".to_string(), Locator::Path(d.path().join("absent")))]);
        let h = b
            .execute(&ctx(d.path(), "s", vec![]), &mock_script(vec![MockBehavior::succeed([])]), &ins, &BTreeMap::new())
            .unwrap();
        assert!(matches!(h.wait(), Termination::Failed(_)));
        assert_eq!(b.stats().spawn_violations, 1);
    }

    #[test]
    fn consumer_notices_vanishing_service() {
        let d = tempfile::tempdir().unwrap();
        let b = MockBackend::default();
        let addr = reserve_port().unwrap();
        let server = b
            .execute(
                &ctx(d.path(), "srv", vec![Slot::new("svc", Resource::service())]),
                &mock_script(vec![MockBehavior::serve()]),
                &BTreeMap::new(),
                &BTreeMap::from([("svc".to_string(), Locator::Endpoint(addr))]),
            )
            .unwrap();
        let consumer = b
            .execute(
                &ctx(d.path(), "c", vec![]),
                &mock_script(vec![MockBehavior::succeed([]).with_delay(300)]),
                &BTreeMap::from([("svc".to_string(), Locator::Endpoint(addr))]),
                &BTreeMap::new(),
            )
            .unwrap();
        std::thread::sleep(Duration::from_millis(30));
        server.kill();
        server.wait();
        assert!(matches!(consumer.wait(), Termination::Failed(_)));
        assert_eq!(b.stats().reachability_violations, 1);
    }

    #[test]
    fn script_document_shape() {
        let text = r#"{"train":[{"succeed":{"outputs":{"model":"m"},"delay_ms":5}},"fail"]}"#;
        let err = serde_json::from_str::<ScriptMap>(text);
        assert!(err.is_err(), "unit variants must be written as maps");
        let text = r#"{"train":[{"succeed":{"outputs":{"model":"m"},"delay_ms":5}},{"fail":{}}]}"#;
        let m: ScriptMap = serde_json::from_str(text).unwrap();
        assert_eq!(m["train"][1], MockBehavior::fail());
    }
}
