use std::sync::{Condvar, Mutex};
use std::time::Duration;

/// Why a branch has to quit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltReason {
    /// Controller or workflow stop; the branch stays resumable.
    Stop,
    /// A join fired without this branch.
    NoLongerNecessary,
    /// Another branch failed and the instance is aborting.
    Failed,
}

/// Per-branch mailbox for halt requests. The first reason raised sticks.
#[derive(Debug, Default)]
pub struct BranchSignal {
    reason: Mutex<Option<HaltReason>>,
    cv: Condvar,
}

impl BranchSignal {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true if this call set the reason.
    pub fn raise(&self, reason: HaltReason) -> bool {
        let mut r = self.reason.lock().expect("signal poisoned");
        let fresh = r.is_none();
        if fresh {
            *r = Some(reason);
        }
        self.cv.notify_all();
        fresh
    }

    pub fn get(&self) -> Option<HaltReason> {
        *self.reason.lock().expect("signal poisoned")
    }

    /// Blocks for up to `timeout` until some reason is raised.
    pub fn wait_timeout(&self, timeout: Duration) -> Option<HaltReason> {
        let guard = self.reason.lock().expect("signal poisoned");
        let (guard, _) = self.cv.wait_timeout_while(guard, timeout, |r| r.is_none()).expect("signal poisoned");
        *guard
    }
}
