//! Handler that starts activity instances behind the engine's back.
//!
//! ```json
//! { "spawn": { "launch": { "instances": 3, "delay_ms": 40 } } }
//! ```
//!
//! A call at a listed position starts the instances on their own threads
//! and returns at once; the engine never learns about them. Calls at other
//! positions return an empty result.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value as Json};
use wee_core::dsl::WorkflowAst;
use wee_core::handlers::{CallToken, Capabilities, HandlerCall, HandlerError, HandlerOutcome, HandlerWrapper};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Spawn {
    instances: u32,
    #[serde(default)]
    delay_ms: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Config {
    spawn: BTreeMap<String, Spawn>,
}

pub struct SpawnHandler {
    config: Config,
    spawned: AtomicU64,
    completed: Arc<AtomicU64>,
    /// Instances still running when each call returned.
    pending_at_return: Mutex<Vec<u64>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl SpawnHandler {
    pub fn from_json(text: &str) -> Result<Self, HandlerError> {
        let config = serde_json::from_str(text).map_err(|e| HandlerError::Config(format!("spawn config: {e}")))?;
        Ok(SpawnHandler {
            config,
            spawned: AtomicU64::new(0),
            completed: Arc::default(),
            pending_at_return: Mutex::default(),
            threads: Mutex::default(),
        })
    }
}

impl HandlerWrapper for SpawnHandler {
    fn name(&self) -> &str {
        "spawn"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn bind(&self, ast: &WorkflowAst) -> Result<(), HandlerError> {
        let known = ast.position_paths();
        match self.config.spawn.keys().find(|p| !known.contains_key(p.as_str())) {
            Some(p) => Err(HandlerError::Bind(format!("spawn config names unknown position `{p}`"))),
            None => Ok(()),
        }
    }

    fn call(&self, call: &HandlerCall, _token: &CallToken) -> HandlerOutcome {
        let Some(spec) = self.config.spawn.get(call.position.as_str()) else {
            return HandlerOutcome::Result(Default::default());
        };
        let mut threads = self.threads.lock().expect("spawn poisoned");
        for _ in 0..spec.instances {
            let completed = self.completed.clone();
            let delay = Duration::from_millis(spec.delay_ms);
            threads.push(std::thread::spawn(move || {
                std::thread::sleep(delay);
                completed.fetch_add(1, Ordering::SeqCst);
            }));
        }
        let spawned = self.spawned.fetch_add(u64::from(spec.instances), Ordering::SeqCst) + u64::from(spec.instances);
        let pending = spawned - self.completed.load(Ordering::SeqCst);
        self.pending_at_return.lock().expect("spawn poisoned").push(pending);
        HandlerOutcome::Result(Default::default())
    }

    fn shutdown(&self) {
        let threads: Vec<_> = self.threads.lock().expect("spawn poisoned").drain(..).collect();
        for t in threads {
            let _ = t.join();
        }
    }

    fn stats(&self) -> Json {
        json!({
            "spawned": self.spawned.load(Ordering::SeqCst),
            "completed": self.completed.load(Ordering::SeqCst),
            "pending_at_return": *self.pending_at_return.lock().expect("spawn poisoned"),
        })
    }
}
