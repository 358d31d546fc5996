//! Shared edge state for one run.
//!
//! Each edge has an availability cell and a neededness cell. All cells of a
//! run live behind one mutex with one condition variable: writers notify on
//! every change and readers block until a predicate over any set of cells
//! holds.

use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Duration;

use crate::backend::Locator;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Availability {
    Available,
    NotAvailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neededness {
    Needed,
    NotNeeded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeState {
    pub availability: Availability,
    pub neededness: Neededness,
    /// Where the resource is, while available.
    pub locator: Option<Locator>,
}

impl EdgeState {
    pub fn available(&self) -> bool {
        self.availability == Availability::Available
    }

    pub fn needed(&self) -> bool {
        self.neededness == Neededness::Needed
    }
}

impl Default for EdgeState {
    fn default() -> Self {
        EdgeState {
            availability: Availability::NotAvailable,
            neededness: Neededness::NotNeeded,
            locator: None,
        }
    }
}

#[derive(Debug, Default)]
pub struct StepState {
    pub running: bool,
    pub kill_sent: bool,
    pub driver_done: bool,
}

#[derive(Debug, Default)]
pub struct BoardState {
    pub edges: Vec<EdgeState>,
    pub steps: Vec<StepState>,
    /// Set once the run delivered, failed or was aborted.
    pub shutdown: bool,
    pub abort_requested: bool,
    pub failure: Option<StepFailure>,
}

/// Terminal failure of one step, which ends the run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepFailure {
    pub step: String,
    pub reason: String,
    pub exhausted: bool,
}

impl BoardState {
    pub fn set_available(&mut self, edges: &[usize], locator: Option<Locator>) {
        for &e in edges {
            self.edges[e].availability = Availability::Available;
            self.edges[e].locator = locator.clone();
        }
    }

    pub fn set_unavailable(&mut self, edges: &[usize]) {
        for &e in edges {
            self.edges[e].availability = Availability::NotAvailable;
            self.edges[e].locator = None;
        }
    }

    pub fn set_needed(&mut self, edges: &[usize], needed: bool) {
        for &e in edges {
            self.edges[e].neededness = if needed {
                Neededness::Needed
            } else {
                Neededness::NotNeeded
            };
        }
    }
}

#[derive(Debug, Default)]
pub struct Board {
    state: Mutex<BoardState>,
    changed: Condvar,
}

impl Board {
    pub fn new(edges: usize, steps: usize) -> Self {
        let state = BoardState {
            edges: vec![EdgeState::default(); edges],
            steps: (0..steps).map(|_| StepState::default()).collect(),
            ..Default::default()
        };
        Board {
            state: Mutex::new(state),
            changed: Condvar::new(),
        }
    }

    pub fn update<R>(&self, f: impl FnOnce(&mut BoardState) -> R) -> R {
        let mut st = self.state.lock().unwrap();
        let r = f(&mut st);
        self.changed.notify_all();
        r
    }

    pub fn read<R>(&self, f: impl FnOnce(&BoardState) -> R) -> R {
        f(&self.state.lock().unwrap())
    }

    /// Blocks until `pred` holds and returns the locked state.
    pub fn wait_until(&self, mut pred: impl FnMut(&BoardState) -> bool) -> MutexGuard<'_, BoardState> {
        let st = self.state.lock().unwrap();
        self.changed.wait_while(st, |s| !pred(s)).unwrap()
    }

    /// Like [`wait_until`](Self::wait_until) but gives up after `timeout`.
    /// The flag reports whether the predicate held.
    pub fn wait_until_timeout(
        &self,
        timeout: Duration,
        mut pred: impl FnMut(&BoardState) -> bool,
    ) -> (MutexGuard<'_, BoardState>, bool) {
        let st = self.state.lock().unwrap();
        let (st, res) = self
            .changed
            .wait_timeout_while(st, timeout, |s| !pred(s))
            .unwrap();
        (st, !res.timed_out())
    }

    pub fn notify(&self) {
        self.changed.notify_all();
    }
}
