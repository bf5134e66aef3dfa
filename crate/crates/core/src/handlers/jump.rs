//! Handler that redirects the thread of control.
//!
//! ```json
//! { "jumps": { "c": { "condition": "i < 2", "target": "b" } } }
//! ```
//!
//! A call at a position in the table evaluates its condition against the
//! call's context snapshot and jumps to the target when it holds. Every
//! other call returns an empty result.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::Deserialize;
use serde_json::{json, Value as Json};

use super::{CallToken, Capabilities, HandlerCall, HandlerError, HandlerOutcome, HandlerWrapper};
use crate::dsl::{PositionId, WorkflowAst};
use crate::engine::check_jump;
use crate::expr::{eval, Expr, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JumpRule {
    pub condition: Expr,
    pub target: PositionId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    condition: String,
    target: PositionId,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    jumps: BTreeMap<PositionId, RawRule>,
}

pub struct JumpHandler {
    table: BTreeMap<PositionId, JumpRule>,
    taken: Mutex<BTreeMap<String, u64>>,
}

impl JumpHandler {
    pub fn new(table: BTreeMap<PositionId, JumpRule>) -> Self {
        JumpHandler { table, taken: Mutex::default() }
    }

    pub fn from_json(text: &str) -> Result<Self, HandlerError> {
        let raw: RawTable = serde_json::from_str(text).map_err(|e| HandlerError::Config(format!("jump table: {e}")))?;
        let mut table = BTreeMap::new();
        for (pos, r) in raw.jumps {
            let condition =
                Expr::parse(&r.condition).map_err(|e| HandlerError::Config(format!("condition for `{pos}`: {e}")))?;
            table.insert(pos, JumpRule { condition, target: r.target });
        }
        Ok(Self::new(table))
    }
}

impl HandlerWrapper for JumpHandler {
    fn name(&self) -> &str {
        "jump"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_jump: true, supports_passthrough: false }
    }

    fn bind(&self, ast: &WorkflowAst) -> Result<(), HandlerError> {
        let declared: Vec<&str> = ast.context.iter().map(|(n, _)| n.as_str()).collect();
        for (pos, rule) in &self.table {
            check_jump(ast, pos, &rule.target).map_err(|e| HandlerError::Bind(format!("from `{pos}`: {e}")))?;
            if let Some(v) = rule.condition.variables().into_iter().find(|v| !declared.contains(v)) {
                return Err(HandlerError::Bind(format!("condition for `{pos}` uses undeclared `{v}`")));
            }
        }
        Ok(())
    }

    fn call(&self, call: &HandlerCall, _token: &CallToken) -> HandlerOutcome {
        let Some(rule) = self.table.get(&call.position) else {
            return HandlerOutcome::Result(Default::default());
        };
        match eval(&rule.condition, &call.context) {
            Ok(Value::Boolean(true)) => {
                *self.taken.lock().expect("jump poisoned").entry(call.position.to_string()).or_default() += 1;
                HandlerOutcome::Jump(rule.target.clone())
            }
            Ok(Value::Boolean(false)) => HandlerOutcome::Result(Default::default()),
            Ok(other) => HandlerOutcome::Error(format!("jump condition is {}, not boolean", other.kind())),
            Err(e) => HandlerOutcome::Error(format!("jump condition: {e}")),
        }
    }

    fn stats(&self) -> Json {
        json!({ "jumps_taken": *self.taken.lock().expect("jump poisoned") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Snapshot;
    use crate::dsl::parse;

    fn call_with(pos: &str, i: i64) -> HandlerCall {
        HandlerCall {
            position: pos.into(),
            endpoint: "x".into(),
            parameters: Default::default(),
            context: Snapshot { values: [("i".to_string(), Value::Integer(i))].into(), version: 0 },
            passthrough: None,
        }
    }

    const FLAT: &str = r#"workflow { handler "jump" endpoint e: "x" context i: 0
        call: a, endpoint: e  manipulate: b { i = i + 1 }  call: c, endpoint: e }"#;

    #[test]
    fn condition_decides() {
        let h = JumpHandler::from_json(r#"{"jumps": {"c": {"condition": "i < 2", "target": "b"}}}"#).unwrap();
        h.bind(&parse(FLAT).unwrap()).unwrap();
        let t = CallToken::detached();
        assert_eq!(h.call(&call_with("c", 0), &t), HandlerOutcome::Jump("b".into()));
        assert_eq!(h.call(&call_with("c", 2), &t), HandlerOutcome::Result(Default::default()));
        assert_eq!(h.call(&call_with("a", 0), &t), HandlerOutcome::Result(Default::default()));
    }

    #[test]
    fn bind_rejects_targets_the_engine_would_refuse() {
        let h = JumpHandler::from_json(r#"{"jumps": {"c": {"condition": "true", "target": "nowhere"}}}"#).unwrap();
        assert!(h.bind(&parse(FLAT).unwrap()).is_err());
        let par = parse(
            r#"workflow { handler "jump" endpoint e: "x"
               parallel wait: all { parallel_branch { call: a, endpoint: e } parallel_branch { call: b, endpoint: e } } }"#,
        )
        .unwrap();
        let h = JumpHandler::from_json(r#"{"jumps": {"a": {"condition": "true", "target": "b"}}}"#).unwrap();
        assert!(h.bind(&par).is_err());
    }
}
