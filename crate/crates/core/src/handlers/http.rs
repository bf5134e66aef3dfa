//! HTTP handler: one JSON POST per call activity.
//!
//! Request body: `{"position", "parameters", "context", "passthrough"}`.
//! A 2xx answer of the form `{"result": {...}}` becomes the call's result;
//! anything else is an error.
//!
//! Each request runs on a worker thread. When the call is stopped the
//! handler answers at once with a passthrough token while the request
//! finishes in the background; its outcome is kept in memory and, when a
//! passthrough directory is configured, in `<dir>/<token>.json`, so a
//! resumed run (in this process or a later one) picks it up without a
//! second request. [`HandlerWrapper::shutdown`] waits for such requests.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde_json::{json, Value as Json};

use super::{CallToken, Capabilities, HandlerCall, HandlerError, HandlerOutcome, HandlerWrapper};
use crate::dsl::{walk, Node, WorkflowAst};
use crate::engine::STOP_ENDPOINT;
use crate::expr::Values;

const POLL: Duration = Duration::from_millis(5);
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

type Outcome = Result<Values, String>;

pub struct HttpHandler {
    agent: ureq::Agent,
    passthrough_dir: Option<PathBuf>,
    tag: String,
    counter: AtomicU64,
    stored: Arc<Mutex<HashMap<String, Outcome>>>,
    pending: Mutex<Vec<JoinHandle<()>>>,
    requests: Mutex<BTreeMap<String, u64>>,
}

fn request(agent: &ureq::Agent, url: &str, body: &Json) -> Outcome {
    let response = match agent.post(url).send_json(body) {
        Ok(r) => r,
        Err(ureq::Error::Status(code, _)) => return Err(format!("HTTP status {code}")),
        Err(e) => return Err(format!("request failed: {e}")),
    };
    let body: Json = response.into_json().map_err(|e| format!("malformed response: {e}"))?;
    let result = body.get("result").cloned().ok_or("response has no `result` member")?;
    serde_json::from_value(result).map_err(|e| format!("malformed result: {e}"))
}

fn outcome_json(o: &Outcome) -> Json {
    match o {
        Ok(v) => json!({ "result": v }),
        Err(e) => json!({ "error": e }),
    }
}

impl HttpHandler {
    pub fn new(timeout: Duration, passthrough_dir: Option<PathBuf>) -> Self {
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
        HttpHandler {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            passthrough_dir,
            tag: format!("{:x}-{:x}", std::process::id(), nanos),
            counter: AtomicU64::new(0),
            stored: Arc::default(),
            pending: Mutex::default(),
            requests: Mutex::default(),
        }
    }

    fn token_path(&self, token: &str) -> Option<PathBuf> {
        self.passthrough_dir.as_ref().map(|d| d.join(format!("{token}.json")))
    }

    fn lookup(&self, token: &str) -> Option<Outcome> {
        if let Some(o) = self.stored.lock().expect("http poisoned").get(token) {
            return Some(o.clone());
        }
        let text = std::fs::read_to_string(self.token_path(token)?).ok()?;
        let v: Json = serde_json::from_str(&text).ok()?;
        if let Some(e) = v.get("error").and_then(Json::as_str) {
            return Some(Err(e.to_owned()));
        }
        serde_json::from_value(v.get("result")?.clone()).ok().map(Ok)
    }

    fn finish(o: Outcome) -> HandlerOutcome {
        match o {
            Ok(v) => HandlerOutcome::Result(v),
            Err(e) => HandlerOutcome::Error(e),
        }
    }
}

impl HandlerWrapper for HttpHandler {
    fn name(&self) -> &str {
        "http"
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_jump: false, supports_passthrough: true }
    }

    fn bind(&self, ast: &WorkflowAst) -> Result<(), HandlerError> {
        let mut bad = None;
        walk(&ast.body, &mut Vec::new(), &mut |node, _| {
            if let Node::Call { endpoint, .. } = node {
                if let Some(uri) = ast.endpoints.get(endpoint) {
                    let ok = uri.starts_with("http://") || uri.starts_with("https://") || uri == STOP_ENDPOINT;
                    if !ok && bad.is_none() {
                        bad = Some(uri.clone());
                    }
                }
            }
        });
        match bad {
            Some(uri) => Err(HandlerError::Bind(format!("endpoint `{uri}` is not an http(s) URI"))),
            None => Ok(()),
        }
    }

    fn call(&self, call: &HandlerCall, token: &CallToken) -> HandlerOutcome {
        if let Some(t) = &call.passthrough {
            match self.lookup(t) {
                Some(o) => return Self::finish(o),
                None => return HandlerOutcome::Error(format!("no stored result for passthrough `{t}`")),
            }
        }
        *self.requests.lock().expect("http poisoned").entry(call.position.to_string()).or_default() += 1;
        let body = json!({
            "position": call.position,
            "parameters": call.parameters,
            "context": call.context.values,
            "passthrough": Json::Null,
        });
        let (tx, rx) = mpsc::channel();
        let worker = {
            let agent = self.agent.clone();
            let url = call.endpoint.clone();
            std::thread::spawn(move || {
                let _ = tx.send(request(&agent, &url, &body));
            })
        };
        loop {
            match rx.recv_timeout(POLL) {
                Ok(o) => {
                    let _ = worker.join();
                    return Self::finish(o);
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let _ = worker.join();
                    return HandlerOutcome::Error("request worker died".into());
                }
                Err(RecvTimeoutError::Timeout) if token.is_stopped() => break,
                Err(RecvTimeoutError::Timeout) => {}
            }
        }

        if !token.wants_passthrough() {
            self.pending.lock().expect("http poisoned").push(worker);
            return HandlerOutcome::Error("call cancelled".into());
        }
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let t = format!("http-{}-{n}", self.tag);
        let stored = self.stored.clone();
        let path = self.token_path(&t);
        let key = t.clone();
        let collector = std::thread::spawn(move || {
            let o = rx.recv().unwrap_or_else(|_| Err("request worker died".into()));
            let _ = worker.join();
            if let Some(p) = path {
                let _ = std::fs::write(p, outcome_json(&o).to_string());
            }
            stored.lock().expect("http poisoned").insert(key, o);
        });
        self.pending.lock().expect("http poisoned").push(collector);
        HandlerOutcome::Passthrough(t)
    }

    fn shutdown(&self) {
        let handles: Vec<_> = self.pending.lock().expect("http poisoned").drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    fn stats(&self) -> Json {
        json!({ "requests": *self.requests.lock().expect("http poisoned") })
    }
}
