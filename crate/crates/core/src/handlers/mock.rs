//! Scripted handler for tests and fixtures.
//!
//! A script maps positions to an ordered list of steps:
//!
//! ```json
//! { "calls": { "book": [ { "result": { "cost": 4000 }, "delay_ms": 10 } ] },
//!   "default": { "result": {} },
//!   "stored": { "p1": { "cost": 4000 } },
//!   "jitter_ms": [0, 5] }
//! ```
//!
//! Each step is consumed once unless it sets `times` or `repeat`. Delays are
//! interruptible; a call stopped during its delay (or while `block`ed)
//! answers with a passthrough token and keeps its result for the resumed run.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value as Json};

use super::{CallToken, Capabilities, HandlerCall, HandlerError, HandlerOutcome, HandlerWrapper};
use crate::dsl::{PositionId, WorkflowAst};
use crate::expr::Values;

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockStep {
    #[serde(default)]
    pub result: Values,
    pub delay_ms: Option<u64>,
    /// How many calls this step answers (default 1).
    pub times: Option<u32>,
    /// Answer every remaining call with this step.
    #[serde(default)]
    pub repeat: bool,
    /// Hold the call until it is stopped.
    #[serde(default)]
    pub block: bool,
    pub error: Option<String>,
    pub jump: Option<PositionId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub calls: BTreeMap<String, Vec<MockStep>>,
    /// Step used for positions without an entry in `calls`.
    pub default: Option<MockStep>,
    /// Results already held under passthrough tokens.
    #[serde(default)]
    pub stored: BTreeMap<String, Values>,
    /// Extra seeded delay per call, inclusive range in milliseconds.
    pub jitter_ms: Option<(u64, u64)>,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, HandlerError> {
        serde_json::from_str(text).map_err(|e| HandlerError::Config(format!("mock script: {e}")))
    }
}

#[derive(Default)]
struct State {
    cursor: HashMap<String, (usize, u32)>,
    seen: HashMap<String, u64>,
    invocations: BTreeMap<String, u64>,
    passthrough_hits: BTreeMap<String, u64>,
    stored: BTreeMap<String, Values>,
}

pub struct MockHandler {
    script: MockScript,
    seed: u64,
    state: Mutex<State>,
}

/// FNV-1a over the seed, position and call ordinal.
fn call_seed(seed: u64, position: &str, n: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(position.as_bytes()).chain(&n.to_le_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

impl MockHandler {
    pub fn new(script: MockScript, seed: u64) -> Self {
        let stored = script.stored.clone();
        MockHandler { script, seed, state: Mutex::new(State { stored, ..State::default() }) }
    }

    /// External invocations of `position` so far.
    pub fn invocations(&self, position: &str) -> u64 {
        self.state.lock().expect("mock poisoned").invocations.get(position).copied().unwrap_or(0)
    }

    pub fn stored(&self, token: &str) -> Option<Values> {
        self.state.lock().expect("mock poisoned").stored.get(token).cloned()
    }

    fn next_step(&self, state: &mut State, position: &str) -> Result<MockStep, String> {
        let Some(steps) = self.script.calls.get(position) else {
            return self.script.default.clone().ok_or_else(|| format!("position `{position}` is not scripted"));
        };
        let (idx, used) = state.cursor.entry(position.to_owned()).or_default();
        while let Some(step) = steps.get(*idx) {
            if step.repeat {
                return Ok(step.clone());
            }
            if *used < step.times.unwrap_or(1) {
                *used += 1;
                return Ok(step.clone());
            }
            *idx += 1;
            *used = 0;
        }
        Err(format!("script for `{position}` is exhausted"))
    }
}

impl HandlerWrapper for MockHandler {
    fn name(&self) -> &str {
        "mock"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_jump: true, supports_passthrough: true }
    }

    fn bind(&self, ast: &WorkflowAst) -> Result<(), HandlerError> {
        let positions = ast.position_paths();
        for (pos, steps) in &self.script.calls {
            if !positions.contains_key(pos.as_str()) {
                return Err(HandlerError::Bind(format!("script names unknown position `{pos}`")));
            }
            for s in steps {
                if let Some(t) = &s.jump {
                    if !positions.contains_key(t) {
                        return Err(HandlerError::Bind(format!("jump target `{t}` is not a position")));
                    }
                }
            }
        }
        Ok(())
    }

    fn call(&self, call: &HandlerCall, token: &CallToken) -> HandlerOutcome {
        let position = call.position.as_str();
        let (step, n) = {
            let mut state = self.state.lock().expect("mock poisoned");
            if let Some(values) = call.passthrough.as_ref().and_then(|t| state.stored.get(t)).cloned() {
                *state.passthrough_hits.entry(position.to_owned()).or_default() += 1;
                return HandlerOutcome::Result(values);
            }
            let n = {
                let seen = state.seen.entry(position.to_owned()).or_default();
                *seen += 1;
                *seen
            };
            *state.invocations.entry(position.to_owned()).or_default() += 1;
            match self.next_step(&mut state, position) {
                Ok(step) => (step, n),
                Err(msg) => return HandlerOutcome::Error(msg),
            }
        };

        let mut delay = step.delay_ms.unwrap_or(0);
        if let Some((lo, hi)) = self.script.jitter_ms {
            let mut rng = ChaCha8Rng::seed_from_u64(call_seed(self.seed, position, n));
            delay += rng.gen_range(lo..=hi.max(lo));
        }
        let interrupted = if step.block {
            while !token.wait(Duration::from_secs(3600)) {}
            true
        } else {
            delay > 0 && token.wait(Duration::from_millis(delay))
        };
        if interrupted {
            if token.wants_passthrough() && step.error.is_none() && step.jump.is_none() {
                let t = format!("mock:{position}:{n}");
                self.state.lock().expect("mock poisoned").stored.insert(t.clone(), step.result);
                return HandlerOutcome::Passthrough(t);
            }
            return HandlerOutcome::Error("call cancelled".into());
        }
        if let Some(msg) = step.error {
            return HandlerOutcome::Error(msg);
        }
        if let Some(target) = step.jump {
            return HandlerOutcome::Jump(target);
        }
        HandlerOutcome::Result(step.result)
    }

    fn stats(&self) -> Json {
        let state = self.state.lock().expect("mock poisoned");
        json!({ "invocations": state.invocations, "passthrough_hits": state.passthrough_hits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Snapshot;
    use crate::expr::Value;

    fn call(pos: &str, passthrough: Option<&str>) -> HandlerCall {
        HandlerCall {
            position: pos.into(),
            endpoint: "x".into(),
            parameters: Values::new(),
            context: Snapshot { values: Values::new(), version: 0 },
            passthrough: passthrough.map(str::to_owned),
        }
    }

    fn mock(script: &str) -> MockHandler {
        MockHandler::new(MockScript::from_json(script).unwrap(), 7)
    }

    #[test]
    fn scripted_result_then_exhaustion() {
        let m = mock(r#"{"calls": {"book_airline": [{"result": {"airline_cost": 4000}}]}}"#);
        let t = CallToken::detached();
        assert_eq!(
            m.call(&call("book_airline", None), &t),
            HandlerOutcome::Result([("airline_cost".to_string(), Value::Integer(4000))].into())
        );
        assert!(matches!(m.call(&call("book_airline", None), &t), HandlerOutcome::Error(_)));
        assert!(matches!(m.call(&call("other", None), &t), HandlerOutcome::Error(_)));
        assert_eq!(m.invocations("book_airline"), 2);
    }

    #[test]
    fn stored_passthrough_does_not_count() {
        let m = mock(r#"{"calls": {"a": [{"result": {}}]}, "stored": {"p1": {"x": 1}}}"#);
        let out = m.call(&call("a", Some("p1")), &CallToken::detached());
        assert_eq!(out, HandlerOutcome::Result([("x".to_string(), Value::Integer(1))].into()));
        assert_eq!(m.invocations("a"), 0);
    }

    #[test]
    fn times_repeat_and_default() {
        let m = mock(
            r#"{"calls": {"a": [{"times": 2, "result": {"v": 1}}, {"repeat": true, "result": {"v": 2}}]},
                "default": {"result": {"d": 0}}}"#,
        );
        let t = CallToken::detached();
        let v = |o: HandlerOutcome| match o {
            HandlerOutcome::Result(r) => r.values().next().cloned(),
            _ => None,
        };
        let seq: Vec<_> = (0..5).map(|_| v(m.call(&call("a", None), &t))).collect();
        assert_eq!(seq, [1, 1, 2, 2, 2].map(|i| Some(Value::Integer(i))).to_vec());
        assert_eq!(v(m.call(&call("zzz", None), &t)), Some(Value::Integer(0)));
    }

    #[test]
    fn blocked_call_yields_passthrough_on_stop() {
        let m = mock(r#"{"calls": {"a": [{"block": true, "result": {"x": 5}}]}}"#);
        let t = CallToken::detached();
        std::thread::scope(|s| {
            let h = s.spawn(|| m.call(&call("a", None), &t));
            std::thread::sleep(Duration::from_millis(20));
            t.stop();
            let out = h.join().unwrap();
            let HandlerOutcome::Passthrough(tok) = out else { panic!("{out:?}") };
            assert_eq!(m.stored(&tok), Some([("x".to_string(), Value::Integer(5))].into()));
            let again = m.call(&call("a", Some(&tok)), &CallToken::detached());
            assert_eq!(again, HandlerOutcome::Result([("x".to_string(), Value::Integer(5))].into()));
            assert_eq!(m.invocations("a"), 1);
        });
    }

    #[test]
    fn jitter_is_seeded() {
        assert_eq!(call_seed(1, "a", 1), call_seed(1, "a", 1));
        assert_ne!(call_seed(1, "a", 1), call_seed(2, "a", 1));
        assert_ne!(call_seed(1, "a", 1), call_seed(1, "a", 2));
    }
}
