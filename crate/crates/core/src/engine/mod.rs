//! Workflow execution.
//!
//! [`start`] and [`resume`] return a running [`Instance`]. Every branch runs
//! on its own thread; all branches of an instance share one context store,
//! one event log and one registry of critical-section mutexes.

mod critical;
mod exec;
mod join;
mod signal;
mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Arc;
use std::thread::JoinHandle;

use thiserror::Error;

pub use signal::{BranchSignal, HaltReason};
pub use state::{BranchId, BranchState, BranchStatus, InstanceState, Lifecycle};

use crate::context::{ContextError, ContextStore, SharedContext};
use crate::dsl::{Node, PositionId, WorkflowAst};
use crate::events::{Clock, EventKind, EventLog, EventRecord, Observer};
use crate::expr::{EvalError, Values};
use crate::handlers::{HandlerError, HandlerWrapper};
use exec::{branch_root, Branch, Shared};

/// Endpoint URI that makes a call activity stop its own instance.
pub const STOP_ENDPOINT: &str = "wee:stop";

pub const DEFAULT_MAX_ITERATIONS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("handler initialisation failed: {0}")]
    HandlerInit(#[from] HandlerError),
    #[error("context: {0}")]
    Context(#[from] ContextError),
    #[error("evaluation failed in {at}: {source}")]
    Eval { at: String, source: EvalError },
    #[error("{at} is not boolean (found {found})")]
    NotBoolean { at: String, found: &'static str },
    #[error("call `{position}` failed: {message}")]
    Handler { position: PositionId, message: String },
    #[error("illegal jump to `{target}`: {reason}")]
    IllegalJump { target: PositionId, reason: &'static str },
    #[error("unsatisfiable join: waits for {needed} branches but only {spawned} were spawned")]
    UnsatisfiableJoin { needed: u32, spawned: usize },
    #[error("iteration cap of {limit} exceeded")]
    IterationCap { limit: u64 },
    #[error("critical section `{0}` entered again by the branch holding it")]
    NestedCritical(String),
    #[error("undefined endpoint `{0}`")]
    UndefinedEndpoint(String),
    #[error("corrupt instance state: {0}")]
    Corrupt(String),
    #[error("cannot resume: {0}")]
    Resume(String),
}

impl EngineError {
    /// The activity the error is attributed to, when there is one.
    pub fn position(&self) -> Option<PositionId> {
        match self {
            EngineError::Handler { position, .. } => Some(position.clone()),
            _ => None,
        }
    }
}

pub struct EngineOptions {
    pub instance_id: String,
    pub max_iterations: u64,
    pub clock: Clock,
    /// JSON Lines sink, flushed per record.
    pub log_writer: Option<Box<dyn Write + Send>>,
    pub observer: Option<Observer>,
    /// Replaces declared initial values before the run starts.
    pub context_overrides: Values,
    /// First sequence number; a resumed run defaults to the saved one.
    pub first_seq: Option<u64>,
    /// Included in instance_start so logs can be matched to their source.
    pub workflow_hash: Option<String>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            instance_id: "instance".into(),
            max_iterations: DEFAULT_MAX_ITERATIONS,
            clock: Clock::System,
            log_writer: None,
            observer: None,
            context_overrides: Values::new(),
            first_seq: None,
            workflow_hash: None,
        }
    }
}

/// Controller adjustments applied when resuming.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResumeOverrides {
    /// Moves a branch's thread of control to another activity.
    pub program_counters: BTreeMap<BranchId, PositionId>,
    /// Activities passed over without events for the rest of the run.
    pub skip: BTreeSet<PositionId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopAck {
    Acknowledged,
    AlreadyStopping,
    /// The run has already ended; nothing to do.
    Terminal,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub lifecycle: Lifecycle,
    pub error: Option<EngineError>,
    pub state: InstanceState,
    pub events: Vec<EventRecord>,
}

impl RunReport {
    pub fn final_values(&self) -> &Values {
        self.state.store.values()
    }
}

pub struct Instance {
    shared: Arc<Shared>,
    root: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for Instance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Instance").field("lifecycle", &self.lifecycle()).finish_non_exhaustive()
    }
}

impl Instance {
    pub fn lifecycle(&self) -> Lifecycle {
        *self.shared.lifecycle.lock().expect("lifecycle poisoned")
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.lifecycle(), Lifecycle::Stopped | Lifecycle::Finished)
    }

    /// Delivers the stop signal. Idempotent.
    pub fn stop(&self) -> StopAck {
        if self.is_terminal() {
            return StopAck::Terminal;
        }
        if self.shared.begin_stop(&BranchId::root(), "controller", HaltReason::Stop) {
            StopAck::Acknowledged
        } else if self.is_terminal() {
            StopAck::Terminal
        } else {
            StopAck::AlreadyStopping
        }
    }

    pub fn events(&self) -> Vec<EventRecord> {
        self.shared.log.records()
    }

    pub fn handler(&self) -> &Arc<dyn HandlerWrapper> {
        &self.shared.handler
    }

    /// Point-in-time view of the instance.
    pub fn state(&self) -> InstanceState {
        InstanceState {
            instance: self.shared.instance_id(),
            lifecycle: self.lifecycle(),
            branches: self.shared.registry.lock().expect("registry poisoned").clone(),
            store: self.shared.context.store(),
            passthroughs: self.shared.passthroughs.lock().expect("passthroughs poisoned").clone(),
            next_seq: self.shared.log.next_seq(),
        }
    }

    /// Blocks until the run ends.
    pub fn wait(mut self) -> RunReport {
        if let Some(h) = self.root.take() {
            let _ = h.join();
        }
        RunReport {
            lifecycle: self.lifecycle(),
            error: self.shared.failure.lock().expect("failure poisoned").clone(),
            state: self.state(),
            events: self.events(),
        }
    }
}

impl Shared {
    fn instance_id(&self) -> String {
        self.log.instance().to_owned()
    }
}

#[allow(clippy::too_many_arguments)]
fn launch(
    ast: Arc<WorkflowAst>,
    handler: Arc<dyn HandlerWrapper>,
    store: ContextStore,
    options: EngineOptions,
    first_seq: u64,
    root: BranchState,
    restore: BTreeMap<BranchId, BranchState>,
    passthroughs: BTreeMap<String, String>,
    skip: BTreeSet<PositionId>,
    resumed: bool,
) -> Result<Instance, EngineError> {
    let log = EventLog::new(options.instance_id, options.clock, first_seq, options.log_writer, options.observer);
    let start_detail = serde_json::json!({
        "resumed": resumed,
        "workflow_hash": options.workflow_hash,
        "context": store.values(),
        "version": store.version(),
    });
    let resume_at = resumed.then(|| root.program_counter.clone());
    let next_child = root.next_child;
    let registry = BTreeMap::from([(root.id.clone(), root)]);
    let shared = Arc::new(Shared::new(
        ast,
        handler,
        SharedContext::new(store),
        log,
        options.max_iterations,
        skip,
        registry,
        restore,
        passthroughs,
    ));
    shared.log.emit(&BranchId::root(), None, EventKind::InstanceStart, start_detail);
    let signal = shared.register_signal(&BranchId::root());
    let branch = Branch::new(BranchId::root(), signal, next_child);
    let runner = shared.clone();
    let handle = std::thread::Builder::new()
        .name("branch-0".into())
        .spawn(move || runner.run_root(branch, resume_at))
        .map_err(|e| EngineError::Corrupt(format!("cannot spawn root branch: {e}")))?;
    Ok(Instance { shared, root: Some(handle) })
}

/// Starts a fresh instance at the first node of the workflow.
pub fn start(
    ast: Arc<WorkflowAst>,
    handler: Arc<dyn HandlerWrapper>,
    options: EngineOptions,
) -> Result<Instance, EngineError> {
    handler.bind(&ast)?;
    let mut store = ContextStore::init(&ast.context)?;
    store.override_values(&options.context_overrides)?;
    let root = BranchState {
        id: BranchId::root(),
        program_counter: vec![0],
        status: BranchStatus::Active,
        parent: None,
        join: None,
        next_child: 0,
    };
    let first_seq = options.first_seq.unwrap_or(0);
    launch(ast, handler, store, options, first_seq, root, BTreeMap::new(), BTreeMap::new(), BTreeSet::new(), false)
}

/// Runs a fresh instance to its end.
pub fn run(
    ast: Arc<WorkflowAst>,
    handler: Arc<dyn HandlerWrapper>,
    options: EngineOptions,
) -> Result<RunReport, EngineError> {
    Ok(start(ast, handler, options)?.wait())
}

/// Checks that a jump from `from` to `to` stays inside the branch that
/// issues it: it may leave and enter sequences, choices, cycles and
/// critical sections, but may neither leave nor enter a parallel block or
/// a parallel branch.
pub fn check_jump(ast: &WorkflowAst, from: &PositionId, to: &PositionId) -> Result<(), EngineError> {
    let paths = ast.position_paths();
    let illegal = |reason| EngineError::IllegalJump { target: to.clone(), reason };
    let src = paths.get(from).ok_or_else(|| illegal("source is not a position"))?;
    let dst = paths.get(to).ok_or_else(|| illegal("no such position"))?;
    let common = src.iter().zip(dst.iter()).take_while(|(a, b)| a == b).count();
    let crosses = |path: &[usize]| {
        (common + 1..path.len())
            .any(|n| matches!(ast.node_at(&path[..n]), Some(Node::Parallel { .. } | Node::ParallelBranch { .. })))
    };
    if crosses(src) {
        return Err(illegal("target lies outside the jumping branch"));
    }
    if crosses(dst) {
        return Err(illegal("target is inside a parallel block that is not entered"));
    }
    Ok(())
}

/// Whether `pc` addresses a node, a join marker, or the end of the body.
fn pc_resolves(ast: &WorkflowAst, pc: &[usize]) -> bool {
    if pc == [ast.body.len()] || ast.node_at(pc).is_some() {
        return true;
    }
    match pc.split_last() {
        Some((&last, parent)) if !parent.is_empty() => {
            matches!(ast.node_at(parent), Some(Node::Parallel { body, .. }) if body.len() == last)
        }
        _ => false,
    }
}

/// Continues a stopped instance.
pub fn resume(
    ast: Arc<WorkflowAst>,
    saved: InstanceState,
    handler: Arc<dyn HandlerWrapper>,
    options: EngineOptions,
    overrides: ResumeOverrides,
) -> Result<Instance, EngineError> {
    if saved.lifecycle != Lifecycle::Stopped {
        return Err(EngineError::Resume(format!("instance is {:?}, not stopped", saved.lifecycle)));
    }
    handler.bind(&ast)?;
    let paths = ast.position_paths();
    let mut branches = saved.branches;
    for (id, position) in &overrides.program_counters {
        let path = paths.get(position).ok_or_else(|| EngineError::Resume(format!("unknown position `{position}`")))?;
        let branch = branches.get_mut(id).ok_or_else(|| EngineError::Resume(format!("unknown branch `{id}`")))?;
        if branch_root(&ast, path) != branch_root(&ast, &branch.program_counter) {
            return Err(EngineError::Resume(format!("position `{position}` is outside the scope of branch `{id}`")));
        }
        branch.program_counter = path.clone();
    }
    for p in &overrides.skip {
        if !paths.contains_key(p) {
            return Err(EngineError::Resume(format!("unknown position `{p}`")));
        }
    }
    for b in branches.values() {
        if !pc_resolves(&ast, &b.program_counter) {
            return Err(EngineError::Corrupt(format!(
                "branch `{}` is at {:?}, which is not in the workflow",
                b.id, b.program_counter
            )));
        }
    }
    let root = branches.remove(&BranchId::root()).ok_or_else(|| EngineError::Corrupt("no root branch".into()))?;
    let store = ContextStore::restore(saved.store.values().clone(), saved.store.version());
    let first_seq = options.first_seq.unwrap_or(saved.next_seq);
    launch(ast, handler, store, options, first_seq, root, branches, saved.passthroughs, overrides.skip, true)
}
