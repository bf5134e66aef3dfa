//! Branch interpreter.
//!
//! Each branch walks the AST on its own thread. Control transfers are
//! expressed as [`Flow`] values: a block catches a jump whose target lies
//! inside it and re-enters the target through an entry tail, the same
//! mechanism that resumes a branch at a saved program counter.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value as Json};

use super::critical::SectionRegistry;
use super::join::JoinState;
use super::{BranchId, BranchSignal, BranchState, BranchStatus, EngineError, HaltReason, Lifecycle, STOP_ENDPOINT};
use crate::context::{ChangeRecord, SharedContext, Snapshot};
use crate::dsl::{Alternative, Block, Node, NodePath, PositionId, WaitSpec, WorkflowAst};
use crate::events::{EventKind, EventLog};
use crate::expr::{apply_assignments, eval, Change, Expr, Value, Values};
use crate::handlers::{CallToken, HandlerCall, HandlerOutcome, HandlerWrapper};

const POLL: Duration = Duration::from_millis(5);

pub(crate) enum Flow {
    Normal,
    Jump(JumpTo),
    Halt,
}

pub(crate) struct JumpTo {
    path: NodePath,
    target: PositionId,
}

type Exec = Result<Flow, EngineError>;

#[derive(Debug, Clone, Copy)]
enum Mode<'a> {
    Resume,
    Jump(&'a PositionId),
}

/// How a node is entered: from the top, or at a path below it.
#[derive(Debug, Clone, Copy)]
enum Entry<'a> {
    Fresh,
    At(Mode<'a>, &'a [usize]),
}

pub(crate) struct Branch {
    pub id: BranchId,
    pub signal: Arc<BranchSignal>,
    joins: Vec<Arc<JoinState>>,
    held: Vec<String>,
    next_child: u32,
    jumps: u64,
}

impl Branch {
    pub fn new(id: BranchId, signal: Arc<BranchSignal>, next_child: u32) -> Self {
        Branch { id, signal, joins: Vec::new(), held: Vec::new(), next_child, jumps: 0 }
    }

    fn status(&self) -> BranchStatus {
        match self.held.last() {
            Some(s) => BranchStatus::InCritical(s.clone()),
            None => BranchStatus::Active,
        }
    }
}

pub(crate) struct Shared {
    pub ast: Arc<WorkflowAst>,
    pub paths: BTreeMap<PositionId, NodePath>,
    pub handler: Arc<dyn HandlerWrapper>,
    pub context: SharedContext,
    pub log: EventLog,
    pub max_iterations: u64,
    pub skip: BTreeSet<PositionId>,
    pub lifecycle: Mutex<Lifecycle>,
    pub failure: Mutex<Option<EngineError>>,
    pub registry: Mutex<BTreeMap<BranchId, BranchState>>,
    pub passthroughs: Mutex<BTreeMap<String, String>>,
    /// Saved branches waiting for their parent to reach their join.
    pub restore: Mutex<BTreeMap<BranchId, BranchState>>,
    stopping: AtomicBool,
    signals: Mutex<BTreeMap<BranchId, Arc<BranchSignal>>>,
    inflight: Mutex<BTreeMap<BranchId, PositionId>>,
    sections: SectionRegistry,
}

/// Path of the `parallel_branch` node owning `pc`, if any.
pub(crate) fn branch_root(ast: &WorkflowAst, pc: &[usize]) -> Option<NodePath> {
    (1..=pc.len())
        .rfind(|&n| matches!(ast.node_at(&pc[..n]), Some(Node::ParallelBranch { .. })))
        .map(|n| pc[..n].to_vec())
}

fn guard(expr: &Expr, snap: &Snapshot, at: &[usize]) -> Result<bool, EngineError> {
    let at = || format!("condition at {at:?}");
    match eval(expr, snap).map_err(|source| EngineError::Eval { at: at(), source })? {
        Value::Boolean(b) => Ok(b),
        other => Err(EngineError::NotBoolean { at: at(), found: other.kind() }),
    }
}

fn join_path(path: &[usize], body: &Block) -> NodePath {
    let mut p = path.to_vec();
    p.push(body.len());
    p
}

fn child_path(path: &[usize], i: usize) -> NodePath {
    let mut p = path.to_vec();
    p.push(i);
    p
}

fn values_json(v: &Values) -> Json {
    serde_json::to_value(v).expect("values serialise")
}

impl Shared {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ast: Arc<WorkflowAst>,
        handler: Arc<dyn HandlerWrapper>,
        context: SharedContext,
        log: EventLog,
        max_iterations: u64,
        skip: BTreeSet<PositionId>,
        registry: BTreeMap<BranchId, BranchState>,
        restore: BTreeMap<BranchId, BranchState>,
        passthroughs: BTreeMap<String, String>,
    ) -> Self {
        Shared {
            paths: ast.position_paths(),
            ast,
            handler,
            context,
            log,
            max_iterations,
            skip,
            lifecycle: Mutex::new(Lifecycle::Running),
            failure: Mutex::new(None),
            registry: Mutex::new(registry),
            passthroughs: Mutex::new(passthroughs),
            restore: Mutex::new(restore),
            stopping: AtomicBool::new(false),
            signals: Mutex::new(BTreeMap::new()),
            inflight: Mutex::new(BTreeMap::new()),
            sections: SectionRegistry::default(),
        }
    }

    pub fn register_signal(&self, id: &BranchId) -> Arc<BranchSignal> {
        let signal = Arc::new(BranchSignal::new());
        self.signals.lock().expect("signals poisoned").insert(id.clone(), signal.clone());
        if self.stopping.load(Ordering::SeqCst) {
            let reason = if self.failure.lock().expect("failure poisoned").is_some() {
                HaltReason::Failed
            } else {
                HaltReason::Stop
            };
            signal.raise(reason);
        }
        signal
    }

    fn halted(&self, br: &Branch) -> bool {
        br.signal.get().is_some() || self.stopping.load(Ordering::SeqCst)
    }

    fn set_pc(&self, br: &Branch, path: &[usize]) {
        if let Some(s) = self.registry.lock().expect("registry poisoned").get_mut(&br.id) {
            s.program_counter = path.to_vec();
        }
    }

    fn set_status(&self, id: &BranchId, status: BranchStatus) {
        if let Some(s) = self.registry.lock().expect("registry poisoned").get_mut(id) {
            s.status = status;
        }
    }

    fn emit(&self, br: &Branch, position: Option<&PositionId>, kind: EventKind, detail: Json) {
        self.log.emit(&br.id, position, kind, detail);
    }

    // ---- stop, cancellation, failure -------------------------------------

    /// Starts an instance-wide stop. Returns false if one is already under
    /// way or the run has ended.
    pub fn begin_stop(&self, by: &BranchId, source: &str, reason: HaltReason) -> bool {
        let signals: Vec<Arc<BranchSignal>> = {
            let mut log = self.log.lock();
            if *self.lifecycle.lock().expect("lifecycle poisoned") != Lifecycle::Running
                || self.stopping.swap(true, Ordering::SeqCst)
            {
                return false;
            }
            log.push(by, None, EventKind::Signal, json!({ "signal": "stop", "source": source }));
            log.push(by, None, EventKind::StopAcknowledged, json!({}));
            for (b, p) in self.inflight.lock().expect("inflight poisoned").iter() {
                log.push(b, Some(p), EventKind::Signal, json!({ "signal": "stop_call" }));
            }
            self.signals.lock().expect("signals poisoned").values().cloned().collect()
        };
        for s in signals {
            s.raise(reason);
        }
        true
    }

    /// Records the first error and aborts every branch.
    pub fn fail(&self, by: &BranchId, error: &EngineError) {
        {
            let mut f = self.failure.lock().expect("failure poisoned");
            if f.is_some() {
                return;
            }
            *f = Some(error.clone());
        }
        let position = error.position();
        self.log.emit(by, position.as_ref(), EventKind::Error, json!({ "message": error.to_string() }));
        self.begin_stop(by, "error", HaltReason::Failed);
        for s in self.signals.lock().expect("signals poisoned").values() {
            s.raise(HaltReason::Failed);
        }
    }

    /// Sends no-longer-necessary to `target`, plus stop_call to its
    /// in-flight call if it has one.
    pub fn cancel_branch(&self, by: &BranchId, target: &BranchId, signal: &BranchSignal) {
        let mut log = self.log.lock();
        log.push(by, None, EventKind::Signal, json!({ "signal": "no_longer_necessary", "target": target.as_str() }));
        if let Some(p) = self.inflight.lock().expect("inflight poisoned").get(target) {
            log.push(
                target,
                Some(p),
                EventKind::Signal,
                json!({ "signal": "stop_call", "reason": "no_longer_necessary" }),
            );
        }
        signal.raise(HaltReason::NoLongerNecessary);
    }

    fn check<T>(&self, br: &Branch, r: Result<T, EngineError>) -> Result<T, EngineError> {
        if let Err(e) = &r {
            self.fail(&br.id, e);
        }
        r
    }

    // ---- branch threads ---------------------------------------------------

    /// Runs the root branch to completion and writes the terminal record.
    pub fn run_root(self: &Arc<Self>, mut br: Branch, resume_at: Option<NodePath>) {
        let entry = match &resume_at {
            Some(t) => Entry::At(Mode::Resume, t.as_slice()),
            None => Entry::Fresh,
        };
        let body = &self.ast.body;
        let outcome = catch_unwind(AssertUnwindSafe(|| self.exec_block(&mut br, body, &[], entry)))
            .unwrap_or_else(|_| Err(EngineError::Corrupt("branch panicked".into())));
        let outcome = match outcome {
            Ok(Flow::Jump(j)) => Err(EngineError::IllegalJump { target: j.target, reason: "target is not in scope" }),
            other => other,
        };
        if let Ok(Flow::Normal) = self.check(&br, outcome) {
            self.set_pc(&br, &[body.len()]);
            self.set_status(&br.id, BranchStatus::Completed);
        }
        self.signals.lock().expect("signals poisoned").remove(&br.id);
        self.finish(&br);
    }

    fn finish(&self, br: &Branch) {
        let values = self.context.snapshot();
        let failure = self.failure.lock().expect("failure poisoned").clone();
        let mut log = self.log.lock();
        let stopped = failure.is_some() || self.stopping.load(Ordering::SeqCst);
        let lifecycle = if stopped { Lifecycle::Stopped } else { Lifecycle::Finished };
        *self.lifecycle.lock().expect("lifecycle poisoned") = lifecycle;
        if stopped {
            let reason = if failure.is_some() { "error" } else { "stop" };
            let mut detail = json!({ "reason": reason });
            if let Some(e) = failure {
                detail["error"] = json!(e.to_string());
            }
            log.push(&br.id, None, EventKind::InstanceStop, detail);
        } else {
            log.push(
                &br.id,
                None,
                EventKind::InstanceFinish,
                json!({ "context": values_json(&values.values), "version": values.version }),
            );
        }
    }

    fn run_child(self: &Arc<Self>, mut br: Branch, root: NodePath, pc: NodePath, join: Arc<JoinState>) {
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let Some(Node::ParallelBranch { body, .. }) = self.ast.node_at(&root) else {
                return Err(EngineError::Corrupt(format!("no parallel branch at {root:?}")));
            };
            let entry = if pc.len() > root.len() { Entry::At(Mode::Resume, &pc[root.len()..]) } else { Entry::Fresh };
            match self.exec_block(&mut br, body, &root, entry)? {
                Flow::Jump(j) => {
                    Err(EngineError::IllegalJump { target: j.target, reason: "target lies outside the jumping branch" })
                }
                other => Ok(other),
            }
        }))
        .unwrap_or_else(|_| Err(EngineError::Corrupt("branch panicked".into())));
        match self.check(&br, outcome) {
            Ok(Flow::Normal) => {
                self.set_status(&br.id, BranchStatus::Completed);
                join.arrive(self, &br.id);
            }
            Ok(_) => {
                let status = match br.signal.get() {
                    Some(HaltReason::NoLongerNecessary) => {
                        self.set_status(&br.id, BranchStatus::Cancelled);
                        "cancelled"
                    }
                    Some(HaltReason::Failed) => "error",
                    _ => "stopped",
                };
                join.exit(self, &br.id, status);
            }
            Err(_) => join.exit(self, &br.id, "error"),
        }
        self.signals.lock().expect("signals poisoned").remove(&br.id);
    }

    fn spawn_child(
        self: &Arc<Self>,
        parent: &mut Branch,
        join: &Arc<JoinState>,
        id: BranchId,
        pc: NodePath,
        next_child: u32,
        announce: bool,
    ) -> Result<(), EngineError> {
        let root = branch_root(&self.ast, &pc)
            .ok_or_else(|| EngineError::Corrupt(format!("branch {id} is not inside a parallel branch")))?;
        let signal = self.register_signal(&id);
        self.registry.lock().expect("registry poisoned").insert(
            id.clone(),
            BranchState {
                id: id.clone(),
                program_counter: pc.clone(),
                status: BranchStatus::Active,
                parent: Some(parent.id.clone()),
                join: Some(join.path.clone()),
                next_child,
            },
        );
        let br = Branch::new(id.clone(), signal.clone(), next_child);
        let shared = self.clone();
        let j = join.clone();
        join.add_child(self, id.clone(), signal, announce, move || {
            std::thread::Builder::new().name(format!("branch-{id}")).spawn(move || shared.run_child(br, root, pc, j))
        })
    }

    // ---- interpreter ------------------------------------------------------

    fn exec_block(self: &Arc<Self>, br: &mut Branch, block: &[Node], base: &[usize], entry: Entry<'_>) -> Exec {
        let mut pending: Option<(Option<PositionId>, Vec<usize>)> = None;
        let mut idx = 0;
        if let Entry::At(mode, tail) = entry {
            let (&first, rest) = tail.split_first().ok_or_else(|| EngineError::Corrupt("empty entry path".into()))?;
            if first > block.len() {
                return Err(EngineError::Corrupt(format!("path index {first} outside block")));
            }
            idx = first;
            let target = match mode {
                Mode::Resume => None,
                Mode::Jump(t) => Some(t.clone()),
            };
            pending = Some((target, rest.to_vec()));
        }
        while idx < block.len() {
            let path = child_path(base, idx);
            let entry = match &pending {
                Some((None, tail)) => Entry::At(Mode::Resume, tail),
                Some((Some(t), tail)) => Entry::At(Mode::Jump(t), tail),
                None => Entry::Fresh,
            };
            let flow = self.exec_node(br, &block[idx], &path, entry)?;
            pending = None;
            match flow {
                Flow::Normal => idx += 1,
                Flow::Halt => return Ok(Flow::Halt),
                Flow::Jump(j) => {
                    if j.path.len() > base.len() && j.path.starts_with(base) {
                        br.jumps += 1;
                        if br.jumps > self.max_iterations {
                            return Err(EngineError::IterationCap { limit: self.max_iterations });
                        }
                        idx = j.path[base.len()];
                        pending = Some((Some(j.target), j.path[base.len() + 1..].to_vec()));
                    } else {
                        return Ok(Flow::Jump(j));
                    }
                }
            }
        }
        Ok(Flow::Normal)
    }

    fn exec_node(self: &Arc<Self>, br: &mut Branch, node: &Node, path: &[usize], entry: Entry<'_>) -> Exec {
        self.set_pc(br, path);
        if self.halted(br) {
            return Ok(Flow::Halt);
        }
        let tail = match entry {
            Entry::At(mode, t) if !t.is_empty() => Some((mode, t)),
            _ => None,
        };
        let jump_target = |mode: Mode<'_>| match mode {
            Mode::Jump(t) => Some(t.clone()),
            Mode::Resume => None,
        };
        match node {
            Node::Call { .. } | Node::Manipulate { .. } => {
                if tail.is_some() {
                    return Err(EngineError::Corrupt(format!("path continues below activity at {path:?}")));
                }
                self.activity(br, node)
            }
            Node::Parallel { wait, body, .. } => {
                if let Some((Mode::Jump(t), _)) = tail {
                    return Err(EngineError::IllegalJump {
                        target: t.clone(),
                        reason: "target is inside a parallel block that is not entered",
                    });
                }
                self.parallel(br, *wait, body, path, tail.map(|(_, t)| t))
            }
            Node::ParallelBranch { .. } => {
                if let Some((mode, _)) = tail {
                    return Err(match jump_target(mode) {
                        Some(target) => {
                            EngineError::IllegalJump { target, reason: "target is inside another parallel branch" }
                        }
                        None => EngineError::Corrupt(format!("spawner positioned inside branch at {path:?}")),
                    });
                }
                self.fork(br, path)
            }
            Node::Choose { alternatives, otherwise, .. } => {
                self.choose(br, alternatives, otherwise.as_ref(), path, tail)
            }
            Node::Cycle { condition, body, .. } => self.cycle(br, condition, body, path, tail),
            Node::Critical { section, body, .. } => self.critical(br, section, body, path, tail),
        }
    }

    fn sub_entry<'a>(tail: Option<(Mode<'a>, &'a [usize])>) -> Entry<'a> {
        match tail {
            Some((m, t)) => Entry::At(m, t),
            None => Entry::Fresh,
        }
    }

    /// Emits activity_start unless a halt has been requested. For calls the
    /// in-flight registration happens in the same critical section, so a
    /// concurrent stop either prevents the start or sees the call.
    fn begin_activity(&self, br: &Branch, position: &PositionId, detail: Json, call: bool) -> bool {
        let mut log = self.log.lock();
        if br.signal.get().is_some() || self.stopping.load(Ordering::SeqCst) {
            return false;
        }
        log.push(&br.id, Some(position), EventKind::ActivityStart, detail);
        if call {
            self.inflight.lock().expect("inflight poisoned").insert(br.id.clone(), position.clone());
        }
        true
    }

    fn emit_changes(&self, br: &Branch, records: &[ChangeRecord]) {
        let mut log = self.log.lock();
        for r in records {
            log.push(
                &br.id,
                Some(&r.position),
                EventKind::ContextChange,
                json!({ "name": r.name, "old": r.old, "new": r.new, "version": r.seq }),
            );
        }
    }

    fn activity(self: &Arc<Self>, br: &mut Branch, node: &Node) -> Exec {
        let position = node.position().expect("activity has a position");
        if self.skip.contains(position) {
            return Ok(Flow::Normal);
        }
        match node {
            Node::Manipulate { statements, .. } => {
                if !self.begin_activity(br, position, json!({ "kind": "manipulate" }), false) {
                    return Ok(Flow::Halt);
                }
                self.context
                    .transact(position, |v| apply_assignments(statements, v), |recs, _| self.emit_changes(br, recs))
                    .map_err(|source| EngineError::Eval { at: format!("`{position}`"), source })?;
                self.emit(br, Some(position), EventKind::ActivityEnd, json!({ "kind": "manipulate" }));
                Ok(Flow::Normal)
            }
            Node::Call { endpoint, parameters, .. } => self.call(br, position, endpoint, parameters),
            _ => unreachable!("not an activity"),
        }
    }

    fn take_passthrough(&self, br: &Branch, position: &PositionId) -> Option<String> {
        let mut p = self.passthroughs.lock().expect("passthroughs poisoned");
        p.remove(&format!("{position}@{}", br.id)).or_else(|| p.remove(position.as_str()))
    }

    fn store_passthrough(&self, br: &Branch, position: &PositionId, token: String) {
        let mut p = self.passthroughs.lock().expect("passthroughs poisoned");
        let key =
            if p.contains_key(position.as_str()) { format!("{position}@{}", br.id) } else { position.to_string() };
        p.insert(key, token);
    }

    fn call(
        self: &Arc<Self>,
        br: &mut Branch,
        position: &PositionId,
        endpoint: &str,
        parameters: &[(String, Expr)],
    ) -> Exec {
        let uri =
            self.ast.endpoints.get(endpoint).ok_or_else(|| EngineError::UndefinedEndpoint(endpoint.to_owned()))?;
        let snapshot = self.context.snapshot();
        let mut params = Values::new();
        for (name, e) in parameters {
            let v = eval(e, &snapshot)
                .map_err(|source| EngineError::Eval { at: format!("parameter `{name}` of `{position}`"), source })?;
            params.insert(name.clone(), v);
        }

        if uri == STOP_ENDPOINT {
            if !self.begin_activity(br, position, json!({ "kind": "call", "endpoint": endpoint, "uri": uri }), false) {
                return Ok(Flow::Halt);
            }
            self.emit(br, Some(position), EventKind::ActivityEnd, json!({ "kind": "call", "outcome": "stop" }));
            self.begin_stop(&br.id, "workflow", HaltReason::Stop);
            return Ok(Flow::Normal);
        }

        let passthrough = self.take_passthrough(br, position);
        let mut detail = json!({
            "kind": "call",
            "endpoint": endpoint,
            "uri": uri,
            "parameters": values_json(&params),
        });
        if let Some(t) = &passthrough {
            detail["passthrough"] = json!(t);
        }
        if !self.begin_activity(br, position, detail, true) {
            if let Some(t) = passthrough {
                self.store_passthrough(br, position, t);
            }
            return Ok(Flow::Halt);
        }
        let call = HandlerCall {
            position: position.clone(),
            endpoint: uri.clone(),
            parameters: params,
            context: snapshot,
            passthrough,
        };
        let token = CallToken::for_branch(br.signal.clone());
        let outcome = self.handler.call(&call, &token);

        let halt = {
            let _log = self.log.lock();
            self.inflight.lock().expect("inflight poisoned").remove(&br.id);
            br.signal.get().or_else(|| self.stopping.load(Ordering::SeqCst).then_some(HaltReason::Stop))
        };
        if let Some(reason) = halt {
            match outcome {
                HandlerOutcome::Passthrough(token) if reason == HaltReason::Stop => {
                    self.emit(
                        br,
                        Some(position),
                        EventKind::Signal,
                        json!({ "signal": "passthrough", "token": token }),
                    );
                    self.store_passthrough(br, position, token);
                }
                other => {
                    let kind = match other {
                        HandlerOutcome::Result(_) => "result",
                        HandlerOutcome::Passthrough(_) => "passthrough",
                        HandlerOutcome::Jump(_) => "jump",
                        HandlerOutcome::Error(_) => "error",
                    };
                    self.emit(br, Some(position), EventKind::Signal, json!({ "signal": "discarded", "outcome": kind }));
                }
            }
            return Ok(Flow::Halt);
        }

        match outcome {
            HandlerOutcome::Result(values) => {
                self.context.transact(
                    position,
                    |cur| {
                        values
                            .iter()
                            .map(|(name, new)| match cur.get(name) {
                                Some(old) => Ok(Change { name: name.clone(), old: old.clone(), new: new.clone() }),
                                None => Err(EngineError::Handler {
                                    position: position.clone(),
                                    message: format!("result names undeclared variable `{name}`"),
                                }),
                            })
                            .collect()
                    },
                    |recs, _| self.emit_changes(br, recs),
                )?;
                self.emit(br, Some(position), EventKind::ActivityEnd, json!({ "kind": "call", "outcome": "result" }));
                Ok(Flow::Normal)
            }
            HandlerOutcome::Jump(target) => {
                let path = self
                    .paths
                    .get(&target)
                    .cloned()
                    .ok_or_else(|| EngineError::IllegalJump { target: target.clone(), reason: "no such position" })?;
                self.emit(
                    br,
                    Some(position),
                    EventKind::ActivityEnd,
                    json!({ "kind": "call", "outcome": "jump", "target": target }),
                );
                Ok(Flow::Jump(JumpTo { path, target }))
            }
            HandlerOutcome::Passthrough(_) => Err(EngineError::Handler {
                position: position.clone(),
                message: "passthrough returned without a stop".into(),
            }),
            HandlerOutcome::Error(message) => Err(EngineError::Handler { position: position.clone(), message }),
        }
    }

    fn fork(self: &Arc<Self>, br: &mut Branch, path: &[usize]) -> Exec {
        let join = br
            .joins
            .last()
            .cloned()
            .ok_or_else(|| EngineError::Corrupt("parallel_branch outside a parallel block".into()))?;
        br.next_child += 1;
        let id = br.id.child(br.next_child);
        if let Some(s) = self.registry.lock().expect("registry poisoned").get_mut(&br.id) {
            s.next_child = br.next_child;
        }
        self.spawn_child(br, &join, id, path.to_vec(), 0, true)?;
        Ok(Flow::Normal)
    }

    fn restore_children(self: &Arc<Self>, br: &mut Branch, join: &Arc<JoinState>) -> Result<(), EngineError> {
        let mine: Vec<BranchState> = {
            let mut restore = self.restore.lock().expect("restore poisoned");
            let ids: Vec<BranchId> = restore
                .values()
                .filter(|s| s.parent.as_ref() == Some(&br.id) && s.join.as_ref() == Some(&join.path))
                .map(|s| s.id.clone())
                .collect();
            ids.iter().filter_map(|id| restore.remove(id)).collect()
        };
        for s in mine {
            if let Some(n) = s.id.ordinal_under(&br.id) {
                br.next_child = br.next_child.max(n);
            }
            match s.status {
                BranchStatus::Completed => {
                    self.registry.lock().expect("registry poisoned").insert(s.id.clone(), s.clone());
                    join.add_completed(s.id);
                }
                BranchStatus::Cancelled => {}
                _ => self.spawn_child(br, join, s.id, s.program_counter, s.next_child, false)?,
            }
        }
        join.settle_restored();
        Ok(())
    }

    /// Waits for all children, passing a no-longer-necessary halt on first.
    fn drain(&self, br: &Branch, join: &JoinState) {
        if br.signal.get() == Some(HaltReason::NoLongerNecessary) {
            join.cancel_running(self);
        }
        join.finish_children();
    }

    fn forget_children(&self, join: &JoinState) {
        let ids = join.child_ids();
        let mut reg = self.registry.lock().expect("registry poisoned");
        reg.retain(|id, _| !ids.iter().any(|c| id == c || id.as_str().starts_with(&format!("{c}."))));
    }

    fn parallel(
        self: &Arc<Self>,
        br: &mut Branch,
        wait: WaitSpec,
        body: &Block,
        path: &[usize],
        tail: Option<&[usize]>,
    ) -> Exec {
        let join = Arc::new(JoinState::new(br.id.clone(), wait, path.to_vec()));
        if tail.is_some() {
            if let Err(e) = self.restore_children(br, &join) {
                self.fail(&br.id, &e);
                self.drain(br, &join);
                return Err(e);
            }
        }
        let body_flow = match tail {
            Some(t) if t[0] == body.len() => {
                if t.len() != 1 {
                    Err(EngineError::Corrupt(format!("path continues past join at {path:?}")))
                } else {
                    Ok(Flow::Normal)
                }
            }
            _ => {
                br.joins.push(join.clone());
                let entry = match tail {
                    Some(t) => Entry::At(Mode::Resume, t),
                    None => Entry::Fresh,
                };
                let f = self.exec_block(br, body, path, entry);
                br.joins.pop();
                f
            }
        };
        let body_flow = match body_flow {
            Ok(Flow::Jump(j)) => {
                Err(EngineError::IllegalJump { target: j.target, reason: "target lies outside the parallel block" })
            }
            other => other,
        };
        match body_flow {
            Err(e) => {
                self.fail(&br.id, &e);
                self.drain(br, &join);
                return Err(e);
            }
            Ok(Flow::Halt) => {
                self.drain(br, &join);
                return Ok(Flow::Halt);
            }
            Ok(_) => {}
        }

        self.set_pc(br, &join_path(path, body));
        self.set_status(&br.id, BranchStatus::WaitingJoin);
        if let Err(e) = join.body_done(self) {
            self.fail(&br.id, &e);
            self.drain(br, &join);
            return Err(e);
        }
        while !join.wait_fired(POLL) {
            if self.halted(br) {
                self.drain(br, &join);
                if !join.fired() {
                    return Ok(Flow::Halt);
                }
                break;
            }
        }
        join.finish_children();
        self.forget_children(&join);
        self.set_status(&br.id, br.status());
        Ok(Flow::Normal)
    }

    fn choose(
        self: &Arc<Self>,
        br: &mut Branch,
        alternatives: &[Alternative],
        otherwise: Option<&Block>,
        path: &[usize],
        tail: Option<(Mode<'_>, &[usize])>,
    ) -> Exec {
        let mut first = 0;
        if let Some((mode, t)) = tail {
            let j = t[0];
            let block = if j < alternatives.len() {
                &alternatives[j].body
            } else if j == alternatives.len() {
                otherwise.ok_or_else(|| EngineError::Corrupt(format!("no otherwise block at {path:?}")))?
            } else {
                return Err(EngineError::Corrupt(format!("no alternative {j} at {path:?}")));
            };
            let rest = &t[1..];
            let entry = if rest.is_empty() { Entry::Fresh } else { Entry::At(mode, rest) };
            match self.exec_block(br, block, &child_path(path, j), entry)? {
                Flow::Normal => {}
                other => return Ok(other),
            }
            if j >= alternatives.len() {
                return Ok(Flow::Normal);
            }
            first = j + 1;
        }
        let snap = self.context.snapshot();
        let mut chosen = Vec::new();
        for (i, alt) in alternatives.iter().enumerate().skip(first) {
            if guard(&alt.condition, &snap, &child_path(path, i))? {
                chosen.push(i);
            }
        }
        for &i in &chosen {
            match self.exec_block(br, &alternatives[i].body, &child_path(path, i), Entry::Fresh)? {
                Flow::Normal => {}
                other => return Ok(other),
            }
        }
        if chosen.is_empty() && tail.is_none() {
            if let Some(block) = otherwise {
                return self.exec_block(br, block, &child_path(path, alternatives.len()), Entry::Fresh);
            }
        }
        Ok(Flow::Normal)
    }

    fn cycle(
        self: &Arc<Self>,
        br: &mut Branch,
        condition: &Expr,
        body: &Block,
        path: &[usize],
        tail: Option<(Mode<'_>, &[usize])>,
    ) -> Exec {
        let mut iterations = 0u64;
        if let Some((mode, t)) = tail {
            iterations = 1;
            match self.exec_block(br, body, path, Entry::At(mode, t))? {
                Flow::Normal => {}
                other => return Ok(other),
            }
        }
        loop {
            self.set_pc(br, path);
            if self.halted(br) {
                return Ok(Flow::Halt);
            }
            if !guard(condition, &self.context.snapshot(), path)? {
                return Ok(Flow::Normal);
            }
            iterations += 1;
            if iterations > self.max_iterations {
                return Err(EngineError::IterationCap { limit: self.max_iterations });
            }
            match self.exec_block(br, body, path, Entry::Fresh)? {
                Flow::Normal => {}
                other => return Ok(other),
            }
        }
    }

    fn critical(
        self: &Arc<Self>,
        br: &mut Branch,
        section: &str,
        body: &Block,
        path: &[usize],
        tail: Option<(Mode<'_>, &[usize])>,
    ) -> Exec {
        if br.held.iter().any(|s| s == section) {
            return Err(EngineError::NestedCritical(section.to_owned()));
        }
        let Some(guard) = self.sections.acquire(section, &br.id, || self.halted(br)) else {
            return Ok(Flow::Halt);
        };
        br.held.push(section.to_owned());
        self.set_status(&br.id, br.status());
        self.emit(br, None, EventKind::CriticalEnter, json!({ "section": section }));
        let flow = self.exec_block(br, body, path, Self::sub_entry(tail));
        self.emit(br, None, EventKind::CriticalExit, json!({ "section": section }));
        br.held.pop();
        self.set_status(&br.id, br.status());
        drop(guard);
        flow
    }
}
