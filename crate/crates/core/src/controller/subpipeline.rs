//! Runs a whole pipeline as the process of one outer step.
//!
//! The inner run shares the backend, cache store and configuration of the
//! outer one. Its arguments are the outer step's resolved inputs together
//! with their causal hashes, so inner edges hash exactly as they would in a
//! standalone run with the same arguments.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};

use super::{Aborter, ArgumentBinding, RunCtx, RunReport, RunStatus, StepPlan};
use crate::backend::{
    verify_outputs, AttemptContext, ExecError, OutputDestinations, ProcessHandle, ResolvedInputs,
    Termination,
};
use crate::model::{Slot, SubpipelineLogic};

#[derive(Default)]
struct State {
    result: Option<Termination>,
    report: Option<RunReport>,
    kill_requested: bool,
}

pub(crate) struct SubpipelineProcess {
    id: String,
    aborter: Aborter,
    state: Mutex<State>,
    done: Condvar,
}

impl SubpipelineProcess {
    /// The inner run's report, once it has finished.
    pub fn report(&self) -> Option<RunReport> {
        self.state.lock().unwrap().report.clone()
    }
}

impl ProcessHandle for SubpipelineProcess {
    fn id(&self) -> &str {
        &self.id
    }

    fn wait(&self) -> Termination {
        let st = self.state.lock().unwrap();
        let st = self.done.wait_while(st, |s| s.result.is_none()).unwrap();
        st.result.clone().expect("set before notify")
    }

    fn poll(&self) -> Option<Termination> {
        self.state.lock().unwrap().result.clone()
    }

    fn kill(&self) {
        self.state.lock().unwrap().kill_requested = true;
        self.aborter.abort();
    }
}

pub(super) fn start(
    ctx: &RunCtx,
    plan: &StepPlan,
    actx: &AttemptContext,
    logic: &SubpipelineLogic,
    inputs: &ResolvedInputs,
    outputs: &OutputDestinations,
) -> Result<Arc<SubpipelineProcess>, ExecError> {
    if !plan.service_outputs.is_empty() {
        return Err(ExecError::SpawnFailure(
            "a subpipeline cannot provide service outputs".into(),
        ));
    }
    let hashes: BTreeMap<&str, _> = plan.inputs.iter().map(|(n, _, h)| (n.as_str(), *h)).collect();
    let mut bindings = BTreeMap::new();
    for (inner, outer) in &logic.arguments {
        let locator = inputs
            .get(outer)
            .ok_or_else(|| ExecError::UnboundName(outer.clone()))?;
        bindings.insert(
            inner.clone(),
            ArgumentBinding::new(locator.clone(), hashes[outer.as_str()]),
        );
    }

    let mut controller = ctx.controller.clone();
    controller.config.run_dir = Some(actx.dir.join("inner"));
    let delivered = actx.dir.join("delivered");
    let handle = controller
        .start_scoped(&logic.pipeline, &bindings, &delivered, &format!("{}/", actx.step))
        .map_err(|e| ExecError::SpawnFailure(e.to_string()))?;

    let process = Arc::new(SubpipelineProcess {
        id: format!("{}#{}", actx.step, actx.attempt),
        aborter: handle.aborter(),
        state: Mutex::new(State::default()),
        done: Condvar::new(),
    });
    let watcher = process.clone();
    let returns = logic.returns.clone();
    let slots = actx.outputs.clone();
    let outputs = outputs.clone();
    std::thread::Builder::new()
        .name(format!("sub {}", actx.step))
        .spawn(move || {
            let report = handle.join();
            let mut termination = match &report.status {
                RunStatus::Delivered => collect(&delivered, &returns, &slots, &outputs),
                RunStatus::FailedExhausted { step } => {
                    Termination::Failed(format!("inner step `{step}` exhausted its attempts"))
                }
                RunStatus::Error { step, message } => {
                    Termination::Failed(format!("inner step `{step}`: {message}"))
                }
                RunStatus::Aborted => Termination::Killed,
            };
            let mut st = watcher.state.lock().unwrap();
            if st.kill_requested {
                termination = Termination::Killed;
            }
            st.result = Some(termination);
            st.report = Some(report);
            watcher.done.notify_all();
        })
        .map_err(|e| ExecError::SpawnFailure(e.to_string()))?;
    Ok(process)
}

/// Moves delivered inner returns to the outer output destinations.
fn collect(
    delivered: &std::path::Path,
    returns: &BTreeMap<String, String>,
    slots: &[Slot],
    outputs: &OutputDestinations,
) -> Termination {
    for (inner, outer) in returns {
        let Some(dst) = outputs.get(outer).and_then(|l| l.as_path()) else {
            continue;
        };
        let src: PathBuf = delivered.join(inner);
        if let Err(e) = fs::rename(&src, dst) {
            return Termination::Failed(format!("moving return `{inner}`: {e}"));
        }
    }
    match verify_outputs(slots, outputs) {
        Ok(()) => Termination::Succeeded,
        Err(reason) => Termination::Failed(reason),
    }
}
