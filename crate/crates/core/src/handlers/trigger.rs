//! Trigger handler: calls block until a matching event occurs.
//!
//! In persistent mode an event is kept until some call consumes it, so it
//! does not matter whether the event or the call comes first. In transient
//! mode an event is only seen by calls already waiting when it arrives;
//! events nobody was waiting for are withdrawn.
//!
//! ```json
//! { "mode": "transient",
//!   "bindings": { "wait_order": "order_received" },
//!   "events": [ { "t": 250, "key": "order_received" } ],
//!   "results": { "wait_order": { "ordered": true } } }
//! ```
//!
//! Event times are milliseconds since the handler was created.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use super::{CallToken, Capabilities, HandlerCall, HandlerError, HandlerOutcome, HandlerWrapper};
use crate::dsl::{PositionId, WorkflowAst};
use crate::expr::Values;

const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMode {
    Persistent,
    Transient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerEvent {
    pub t: u64,
    pub key: String,
}

/// Trigger semantics over a timeline, independent of wall-clock time.
#[derive(Debug, Clone)]
pub struct TriggerBoard {
    mode: TriggerMode,
    events: Vec<(TriggerEvent, bool)>,
}

impl TriggerBoard {
    pub fn new(mode: TriggerMode) -> Self {
        TriggerBoard { mode, events: Vec::new() }
    }

    pub fn post(&mut self, event: TriggerEvent) {
        self.events.push((event, false));
    }

    fn candidates<'a>(&'a self, key: &'a str, since: u64) -> impl Iterator<Item = (usize, u64)> + 'a {
        self.events.iter().enumerate().filter_map(move |(i, (e, used))| {
            let visible = match self.mode {
                TriggerMode::Persistent => true,
                TriggerMode::Transient => e.t >= since,
            };
            (!used && e.key == key && visible).then_some((i, e.t))
        })
    }

    /// The event that releases a call waiting on `key` since `since`, given
    /// everything that has arrived by `now`. Earliest arrival wins.
    pub fn ready(&self, key: &str, since: u64, now: u64) -> Option<usize> {
        self.candidates(key, since).filter(|&(_, t)| t <= now).min_by_key(|&(i, t)| (t, i)).map(|(i, _)| i)
    }

    /// Arrival time of the next event that could release such a call.
    pub fn next_arrival(&self, key: &str, since: u64, now: u64) -> Option<u64> {
        self.candidates(key, since).map(|(_, t)| t).filter(|&t| t > now).min()
    }

    pub fn consume(&mut self, index: usize) {
        self.events[index].1 = true;
    }
}

/// When a single call on `key` issued at `call_t` is released, if ever.
pub fn release_time(mode: TriggerMode, events: &[TriggerEvent], key: &str, call_t: u64) -> Option<u64> {
    let matching = events.iter().filter(|e| e.key == key).map(|e| e.t);
    match mode {
        TriggerMode::Persistent => matching.map(|t| t.max(call_t)).min(),
        TriggerMode::Transient => matching.filter(|&t| t >= call_t).min(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    pub mode: TriggerMode,
    #[serde(default)]
    pub bindings: BTreeMap<PositionId, String>,
    #[serde(default)]
    pub events: Vec<TriggerEvent>,
    #[serde(default)]
    pub results: BTreeMap<PositionId, Values>,
}

pub struct TriggerHandler {
    config: TriggerConfig,
    board: Mutex<TriggerBoard>,
    fired: Mutex<BTreeMap<String, Vec<u64>>>,
    epoch: Instant,
}

impl TriggerHandler {
    pub fn new(config: TriggerConfig) -> Self {
        let mut board = TriggerBoard::new(config.mode);
        for e in &config.events {
            board.post(e.clone());
        }
        TriggerHandler { config, board: Mutex::new(board), fired: Mutex::default(), epoch: Instant::now() }
    }

    pub fn from_json(text: &str) -> Result<Self, HandlerError> {
        serde_json::from_str(text).map(Self::new).map_err(|e| HandlerError::Config(format!("trigger config: {e}")))
    }

    /// Parses a JSON Lines file of `{"t": ms, "key": ...}` records.
    pub fn parse_events(text: &str) -> Result<Vec<TriggerEvent>, HandlerError> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| HandlerError::Config(format!("trigger event: {e}"))))
            .collect()
    }

    fn now(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    /// Posts an event arriving now.
    pub fn post(&self, key: &str) {
        let t = self.now();
        self.post_at(TriggerEvent { t, key: key.to_owned() });
    }

    pub fn post_at(&self, event: TriggerEvent) {
        self.board.lock().expect("trigger poisoned").post(event);
    }
}

impl HandlerWrapper for TriggerHandler {
    fn name(&self) -> &str {
        "trigger"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_jump: false, supports_passthrough: true }
    }

    fn bind(&self, ast: &WorkflowAst) -> Result<(), HandlerError> {
        let positions = ast.position_paths();
        for p in self.config.bindings.keys().chain(self.config.results.keys()) {
            if !positions.contains_key(p) {
                return Err(HandlerError::Bind(format!("trigger config names unknown position `{p}`")));
            }
        }
        Ok(())
    }

    fn call(&self, call: &HandlerCall, token: &CallToken) -> HandlerOutcome {
        let result = self.config.results.get(&call.position).cloned().unwrap_or_default();
        let Some(key) = self.config.bindings.get(&call.position) else {
            return HandlerOutcome::Result(result);
        };
        let since = call
            .passthrough
            .as_deref()
            .and_then(|t| t.rsplit(':').next())
            .and_then(|s| s.parse().ok())
            .unwrap_or_else(|| self.now());
        loop {
            let wait = {
                let mut board = self.board.lock().expect("trigger poisoned");
                let now = self.now();
                if let Some(i) = board.ready(key, since, now) {
                    board.consume(i);
                    self.fired.lock().expect("trigger poisoned").entry(key.clone()).or_default().push(now);
                    return HandlerOutcome::Result(result);
                }
                board.next_arrival(key, since, now).map_or(POLL, |t| Duration::from_millis(t - now).min(POLL))
            };
            if token.wait(wait) {
                return if token.wants_passthrough() {
                    HandlerOutcome::Passthrough(format!("trigger:{}:{since}", call.position))
                } else {
                    HandlerOutcome::Error("call cancelled".into())
                };
            }
        }
    }

    fn stats(&self) -> Json {
        json!({ "fired": *self.fired.lock().expect("trigger poisoned") })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Snapshot;

    fn ev(t: u64) -> TriggerEvent {
        TriggerEvent { t, key: "k".into() }
    }

    #[test]
    fn persistent_event_before_call_fires_immediately() {
        assert_eq!(release_time(TriggerMode::Persistent, &[ev(0)], "k", 5), Some(5));
        let mut b = TriggerBoard::new(TriggerMode::Persistent);
        b.post(ev(0));
        assert_eq!(b.ready("k", 5, 5), Some(0));
    }

    #[test]
    fn transient_event_before_call_is_withdrawn() {
        assert_eq!(release_time(TriggerMode::Transient, &[ev(0)], "k", 5), None);
        let mut b = TriggerBoard::new(TriggerMode::Transient);
        b.post(ev(0));
        assert_eq!(b.ready("k", 5, 1000), None);
    }

    #[test]
    fn transient_event_during_wait_fires() {
        assert_eq!(release_time(TriggerMode::Transient, &[ev(7)], "k", 5), Some(7));
        let mut b = TriggerBoard::new(TriggerMode::Transient);
        b.post(ev(7));
        assert_eq!(b.ready("k", 5, 6), None);
        assert_eq!(b.next_arrival("k", 5, 6), Some(7));
        assert_eq!(b.ready("k", 5, 7), Some(0));
    }

    fn call(pos: &str) -> HandlerCall {
        HandlerCall {
            position: pos.into(),
            endpoint: "x".into(),
            parameters: Values::new(),
            context: Snapshot { values: Values::new(), version: 0 },
            passthrough: None,
        }
    }

    #[test]
    fn live_handler_waits_for_posted_event() {
        let h = TriggerHandler::from_json(r#"{"mode": "transient", "bindings": {"w": "go"}}"#).unwrap();
        let t = CallToken::detached();
        std::thread::scope(|s| {
            let r = s.spawn(|| h.call(&call("w"), &t));
            std::thread::sleep(Duration::from_millis(30));
            h.post("go");
            assert_eq!(r.join().unwrap(), HandlerOutcome::Result(Values::new()));
        });
        assert_eq!(h.call(&call("unbound"), &t), HandlerOutcome::Result(Values::new()));
    }

    #[test]
    fn blocked_trigger_stops_with_passthrough() {
        let h = TriggerHandler::from_json(r#"{"mode": "persistent", "bindings": {"w": "never"}}"#).unwrap();
        let t = CallToken::detached();
        std::thread::scope(|s| {
            let r = s.spawn(|| h.call(&call("w"), &t));
            std::thread::sleep(Duration::from_millis(20));
            t.stop();
            assert!(matches!(r.join().unwrap(), HandlerOutcome::Passthrough(_)));
        });
    }
}
