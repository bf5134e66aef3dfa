//! Handler whose calls start a nested instance of the same workflow.
//!
//! A call must pass a `depth` parameter; at zero or below the call fails,
//! which bounds the recursion. The remaining parameters replace the nested
//! instance's initial context values, and `depth` is handed down
//! decremented if the workflow declares it. The result is the nested
//! instance's final context without the passed parameters and `depth`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::Duration;

use serde_json::{json, Value as Json};

use super::{CallToken, Capabilities, HandlerCall, HandlerError, HandlerOutcome, HandlerWrapper};
use crate::dsl::WorkflowAst;
use crate::engine::{self, EngineOptions, Lifecycle};
use crate::events::Clock;
use crate::expr::{Value, Values};

const POLL: Duration = Duration::from_millis(5);

pub struct RecursiveHandler {
    me: Weak<RecursiveHandler>,
    ast: Mutex<Option<Arc<WorkflowAst>>>,
    clock: Clock,
    nested: AtomicU64,
}

impl RecursiveHandler {
    pub fn new(clock: Clock) -> Arc<Self> {
        Arc::new_cyclic(|me| RecursiveHandler {
            me: me.clone(),
            ast: Mutex::default(),
            clock,
            nested: AtomicU64::new(0),
        })
    }

    pub fn nested_instances(&self) -> u64 {
        self.nested.load(Ordering::SeqCst)
    }
}

impl HandlerWrapper for RecursiveHandler {
    fn name(&self) -> &str {
        "recursive"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn bind(&self, ast: &WorkflowAst) -> Result<(), HandlerError> {
        let mut slot = self.ast.lock().expect("recursive poisoned");
        if slot.as_deref().is_some_and(|a| a != ast) {
            return Err(HandlerError::Bind("already bound to a different workflow".into()));
        }
        slot.get_or_insert_with(|| Arc::new(ast.clone()));
        Ok(())
    }

    fn call(&self, call: &HandlerCall, token: &CallToken) -> HandlerOutcome {
        let depth = match call.parameters.get("depth") {
            Some(Value::Integer(d)) => *d,
            Some(other) => return HandlerOutcome::Error(format!("`depth` must be an integer, found {}", other.kind())),
            None => return HandlerOutcome::Error("recursive call needs a `depth` parameter".into()),
        };
        if depth <= 0 {
            return HandlerOutcome::Error("recursion depth exhausted".into());
        }
        let Some(ast) = self.ast.lock().expect("recursive poisoned").clone() else {
            return HandlerOutcome::Error("handler is not bound".into());
        };
        let Some(me) = self.me.upgrade() else {
            return HandlerOutcome::Error("handler is shutting down".into());
        };
        let mut overrides: Values = call.parameters.clone();
        overrides.remove("depth");
        if ast.context.iter().any(|(n, _)| n == "depth") {
            overrides.insert("depth".into(), Value::Integer(depth - 1));
        }
        let n = self.nested.fetch_add(1, Ordering::SeqCst) + 1;
        let options = EngineOptions {
            instance_id: format!("{}~{n}", call.position),
            clock: self.clock,
            context_overrides: overrides,
            ..EngineOptions::default()
        };
        let instance = match engine::start(ast, me, options) {
            Ok(i) => i,
            Err(e) => return HandlerOutcome::Error(format!("nested instance: {e}")),
        };
        while !instance.is_terminal() {
            if token.wait(POLL) {
                instance.stop();
                instance.wait();
                return HandlerOutcome::Error("call cancelled".into());
            }
        }
        let report = instance.wait();
        if report.lifecycle != Lifecycle::Finished {
            let why = report.error.map_or_else(|| "stopped".to_owned(), |e| e.to_string());
            return HandlerOutcome::Error(format!("nested instance did not finish: {why}"));
        }
        let mut result = report.final_values().clone();
        for name in call.parameters.keys() {
            result.remove(name);
        }
        HandlerOutcome::Result(result)
    }

    fn stats(&self) -> Json {
        json!({ "nested_instances": self.nested_instances() })
    }
}
