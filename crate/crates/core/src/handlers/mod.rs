//! Handler wrappers: the engine delegates every call activity to one.

pub mod http;
pub mod jump;
pub mod mock;
pub mod recursive;
pub mod trigger;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::context::Snapshot;
use crate::dsl::{PositionId, WorkflowAst};
use crate::engine::{BranchSignal, HaltReason};
use crate::events::Clock;
use crate::expr::Values;

pub use http::HttpHandler;
pub use jump::JumpHandler;
pub use mock::{MockHandler, MockScript};
pub use recursive::RecursiveHandler;
pub use trigger::{TriggerEvent, TriggerHandler, TriggerMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerCall {
    pub position: PositionId,
    pub endpoint: String,
    pub parameters: Values,
    pub context: Snapshot,
    /// Present only when resuming a call that was stopped earlier.
    pub passthrough: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandlerOutcome {
    /// Values committed to context at the call's position.
    Result(Values),
    /// Opaque token naming a stored result; valid only after a stop.
    Passthrough(String),
    /// Move the branch's thread of control to another activity.
    Jump(PositionId),
    Error(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Capabilities {
    pub supports_jump: bool,
    pub supports_passthrough: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HandlerError {
    #[error("invalid handler configuration: {0}")]
    Config(String),
    #[error("handler cannot serve this workflow: {0}")]
    Bind(String),
}

/// Cancellation handle passed to an in-flight call.
///
/// Tripping it is the stop_call directive: the handler should return
/// promptly with either a final result or a passthrough token.
#[derive(Debug, Clone)]
pub struct CallToken {
    signal: Arc<BranchSignal>,
}

impl CallToken {
    pub(crate) fn for_branch(signal: Arc<BranchSignal>) -> Self {
        CallToken { signal }
    }

    /// A token nobody else holds; stop it with [`CallToken::stop`].
    pub fn detached() -> Self {
        CallToken { signal: Arc::new(BranchSignal::new()) }
    }

    pub fn stop(&self) {
        self.signal.raise(HaltReason::Stop);
    }

    pub fn is_stopped(&self) -> bool {
        self.signal.get().is_some()
    }

    /// True when the call was stopped with the intent to resume later, in
    /// which case a passthrough token is worth returning.
    pub fn wants_passthrough(&self) -> bool {
        self.signal.get() == Some(HaltReason::Stop)
    }

    /// Sleeps up to `timeout`; returns true if stopped in the meantime.
    pub fn wait(&self, timeout: Duration) -> bool {
        self.signal.wait_timeout(timeout).is_some()
    }
}

/// The pluggable component that executes call activities.
///
/// `call` runs on branch threads, possibly concurrently for different
/// positions, and may block. Stop requests arrive through the token.
pub trait HandlerWrapper: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> Capabilities;

    /// Checks the handler's configuration against the workflow before start.
    fn bind(&self, _ast: &WorkflowAst) -> Result<(), HandlerError> {
        Ok(())
    }

    fn call(&self, call: &HandlerCall, token: &CallToken) -> HandlerOutcome;

    /// Waits for background work (e.g. requests that outlived a stop).
    fn shutdown(&self) {}

    /// Handler-specific counters, such as external invocations per position.
    fn stats(&self) -> Json {
        Json::Object(Default::default())
    }
}

pub const HANDLER_KINDS: [&str; 5] = ["mock", "http", "trigger", "jump", "recursive"];

/// Everything needed to construct a handler by name.
#[derive(Debug, Clone)]
pub struct HandlerSpec {
    pub kind: String,
    /// Kind-specific JSON: mock script, trigger config or jump table.
    pub config: Option<String>,
    /// Seeds the mock handler's jitter.
    pub seed: u64,
    pub passthrough_dir: Option<PathBuf>,
    pub timeout: Duration,
    pub clock: Clock,
    /// Extra trigger events, e.g. from an events file.
    pub trigger_events: Vec<TriggerEvent>,
}

impl HandlerSpec {
    pub fn new(kind: impl Into<String>) -> Self {
        HandlerSpec {
            kind: kind.into(),
            config: None,
            seed: 0,
            passthrough_dir: None,
            timeout: http::DEFAULT_TIMEOUT,
            clock: Clock::System,
            trigger_events: Vec::new(),
        }
    }

    pub fn with_config(mut self, json: impl Into<String>) -> Self {
        self.config = Some(json.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

pub fn create(spec: &HandlerSpec) -> Result<Arc<dyn HandlerWrapper>, HandlerError> {
    let config = spec.config.as_deref();
    let need =
        |what: &str| config.ok_or_else(|| HandlerError::Config(format!("the {what} handler needs a configuration")));
    Ok(match spec.kind.as_str() {
        "mock" => {
            let script = config.map(MockScript::from_json).transpose()?.unwrap_or_default();
            Arc::new(MockHandler::new(script, spec.seed))
        }
        "http" => Arc::new(HttpHandler::new(spec.timeout, spec.passthrough_dir.clone())),
        "trigger" => {
            let h = TriggerHandler::from_json(need("trigger")?)?;
            for e in &spec.trigger_events {
                h.post_at(e.clone());
            }
            Arc::new(h)
        }
        "jump" => Arc::new(JumpHandler::from_json(need("jump")?)?),
        "recursive" => RecursiveHandler::new(spec.clock),
        other => {
            return Err(HandlerError::Config(format!(
                "unknown handler `{other}` (expected one of {})",
                HANDLER_KINDS.join(", ")
            )))
        }
    })
}
