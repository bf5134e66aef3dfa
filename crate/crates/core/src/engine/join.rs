use std::io;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::json;

use super::exec::Shared;
use super::{BranchId, BranchSignal, EngineError};
use crate::dsl::{NodePath, WaitSpec};
use crate::events::EventKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ChildState {
    Running,
    Arrived,
    /// Finished or halted after the join had already fired.
    Late,
    Halted,
}

struct Child {
    id: BranchId,
    signal: Arc<BranchSignal>,
    handle: Option<JoinHandle<()>>,
    state: ChildState,
}

#[derive(Default)]
struct Inner {
    children: Vec<Child>,
    arrived: usize,
    body_done: bool,
    fired: bool,
}

/// Synchronisation point of one parallel block execution.
pub(crate) struct JoinState {
    pub owner: BranchId,
    pub wait: WaitSpec,
    pub path: NodePath,
    inner: Mutex<Inner>,
    cv: Condvar,
}

impl JoinState {
    pub fn new(owner: BranchId, wait: WaitSpec, path: NodePath) -> Self {
        JoinState { owner, wait, path, inner: Mutex::default(), cv: Condvar::new() }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().expect("join poisoned")
    }

    /// Registers a child and starts its thread. A child forked after the
    /// join fired is told straight away that it is no longer necessary.
    pub fn add_child(
        &self,
        shared: &Shared,
        id: BranchId,
        signal: Arc<BranchSignal>,
        announce: bool,
        spawn: impl FnOnce() -> io::Result<JoinHandle<()>>,
    ) -> Result<(), EngineError> {
        let mut inner = self.lock();
        if announce {
            shared.log.emit(&self.owner, None, EventKind::BranchFork, json!({ "child": id.as_str() }));
        }
        if inner.fired {
            shared.cancel_branch(&self.owner, &id, &signal);
        }
        let handle = spawn().map_err(|e| EngineError::Corrupt(format!("cannot spawn branch: {e}")))?;
        inner.children.push(Child { id, signal, handle: Some(handle), state: ChildState::Running });
        Ok(())
    }

    /// A child restored from a saved instance that had already arrived.
    pub fn add_completed(&self, id: BranchId) {
        let mut inner = self.lock();
        inner.arrived += 1;
        inner.children.push(Child {
            id,
            signal: Arc::new(BranchSignal::new()),
            handle: None,
            state: ChildState::Arrived,
        });
    }

    /// After restoring children: a count join whose quota was already met
    /// before the stop has fired, and must not fire a second time.
    pub fn settle_restored(&self) {
        let mut inner = self.lock();
        if let WaitSpec::Count(k) = self.wait {
            if inner.arrived >= k as usize {
                inner.fired = true;
            }
        }
    }

    pub fn arrive(&self, shared: &Shared, id: &BranchId) {
        let mut inner = self.lock();
        let late = inner.fired;
        if let Some(c) = inner.children.iter_mut().find(|c| &c.id == id) {
            c.state = if late { ChildState::Late } else { ChildState::Arrived };
        }
        let status = if late { "cancelled" } else { "completed" };
        shared.log.emit(id, None, EventKind::BranchEnd, json!({ "status": status }));
        if !late {
            inner.arrived += 1;
            self.try_fire(&mut inner, shared);
        }
        self.cv.notify_all();
    }

    /// A child that halted before finishing its body.
    pub fn exit(&self, shared: &Shared, id: &BranchId, status: &str) {
        let mut inner = self.lock();
        let fired = inner.fired;
        if let Some(c) = inner.children.iter_mut().find(|c| &c.id == id) {
            c.state = if fired { ChildState::Late } else { ChildState::Halted };
        }
        shared.log.emit(id, None, EventKind::BranchEnd, json!({ "status": status }));
        self.cv.notify_all();
    }

    /// The spawning branch has run the whole body.
    pub fn body_done(&self, shared: &Shared) -> Result<(), EngineError> {
        let mut inner = self.lock();
        inner.body_done = true;
        if let WaitSpec::Count(k) = self.wait {
            if !inner.fired && inner.children.len() < k as usize {
                return Err(EngineError::UnsatisfiableJoin { needed: k, spawned: inner.children.len() });
            }
        }
        self.try_fire(&mut inner, shared);
        Ok(())
    }

    fn try_fire(&self, inner: &mut Inner, shared: &Shared) {
        if inner.fired {
            return;
        }
        let ready = match self.wait {
            WaitSpec::All => inner.body_done && inner.arrived == inner.children.len(),
            WaitSpec::Count(k) => inner.arrived >= k as usize,
        };
        if !ready {
            return;
        }
        inner.fired = true;
        let arrived: Vec<&str> =
            inner.children.iter().filter(|c| c.state == ChildState::Arrived).map(|c| c.id.as_str()).collect();
        let children: Vec<&str> = inner.children.iter().map(|c| c.id.as_str()).collect();
        let wait = match self.wait {
            WaitSpec::All => json!("all"),
            WaitSpec::Count(k) => json!(k),
        };
        shared.log.emit(
            &self.owner,
            None,
            EventKind::BranchJoin,
            json!({ "wait": wait, "arrived": arrived, "children": children }),
        );
        for c in inner.children.iter().filter(|c| c.state == ChildState::Running) {
            if c.signal.get().is_none() {
                shared.cancel_branch(&self.owner, &c.id, &c.signal);
            }
        }
        self.cv.notify_all();
    }

    pub fn fired(&self) -> bool {
        self.lock().fired
    }

    pub fn wait_fired(&self, timeout: Duration) -> bool {
        let inner = self.lock();
        let (inner, _) = self.cv.wait_timeout_while(inner, timeout, |i| !i.fired).expect("join poisoned");
        inner.fired
    }

    /// Passes a no-longer-necessary halt on to every child still running.
    pub fn cancel_running(&self, shared: &Shared) {
        let inner = self.lock();
        for c in inner.children.iter().filter(|c| c.state == ChildState::Running) {
            if c.signal.get().is_none() {
                shared.cancel_branch(&self.owner, &c.id, &c.signal);
            }
        }
    }

    /// Blocks until every child thread has exited.
    pub fn finish_children(&self) {
        let handles: Vec<JoinHandle<()>> = {
            let inner = self.lock();
            let mut inner = self
                .cv
                .wait_while(inner, |i| i.children.iter().any(|c| c.state == ChildState::Running))
                .expect("join poisoned");
            inner.children.iter_mut().filter_map(|c| c.handle.take()).collect()
        };
        for h in handles {
            let _ = h.join();
        }
    }

    pub fn child_ids(&self) -> Vec<BranchId> {
        self.lock().children.iter().map(|c| c.id.clone()).collect()
    }
}
