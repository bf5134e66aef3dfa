//! A small HTTP service for exercising the HTTP handler.
//!
//! Every POST body is expected to carry a `position` field. The stub counts
//! requests per position, can hold a response back for a configured delay,
//! answer with a configured status, and replies `{"result": {...}}`.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

#[derive(Debug, Clone, Default)]
pub struct StubConfig {
    pub delays: HashMap<String, Duration>,
    pub status: HashMap<String, u16>,
    pub results: HashMap<String, Value>,
}

impl StubConfig {
    pub fn delay(mut self, position: &str, d: Duration) -> Self {
        self.delays.insert(position.into(), d);
        self
    }

    pub fn status(mut self, position: &str, code: u16) -> Self {
        self.status.insert(position.into(), code);
        self
    }

    pub fn result(mut self, position: &str, result: Value) -> Self {
        self.results.insert(position.into(), result);
        self
    }
}

#[derive(Default)]
struct Counts {
    per_position: HashMap<String, usize>,
    bodies: Vec<Value>,
}

struct State {
    config: StubConfig,
    counts: Mutex<Counts>,
    cv: Condvar,
}

pub struct StubServer {
    addr: SocketAddr,
    state: Arc<State>,
    shutdown: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start(config: StubConfig) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let state = Arc::new(State { config, counts: Mutex::default(), cv: Condvar::new() });
        let shutdown = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let state = state.clone();
            let shutdown = shutdown.clone();
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if shutdown.load(Ordering::SeqCst) {
                        break;
                    }
                    if let Ok(stream) = stream {
                        let state = state.clone();
                        std::thread::spawn(move || {
                            let _ = serve(stream, &state);
                        });
                    }
                }
            })
        };
        Ok(StubServer { addr, state, shutdown, acceptor: Some(acceptor) })
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}/{}", self.addr, path.trim_start_matches('/'))
    }

    /// Requests received for `position`, counted on arrival.
    pub fn count(&self, position: &str) -> usize {
        self.state.counts.lock().unwrap().per_position.get(position).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.state.counts.lock().unwrap().per_position.values().sum()
    }

    pub fn counts(&self) -> HashMap<String, usize> {
        self.state.counts.lock().unwrap().per_position.clone()
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.state.counts.lock().unwrap().bodies.clone()
    }

    /// Waits until `position` has received at least `n` requests.
    pub fn wait_for_count(&self, position: &str, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut counts = self.state.counts.lock().unwrap();
        loop {
            if counts.per_position.get(position).copied().unwrap_or(0) >= n {
                return true;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            counts = self.state.cv.wait_timeout(counts, left).unwrap().0;
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, state: &State) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    if request_line.is_empty() {
        return Ok(());
    }
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                length = value.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body)?;
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let position = body.get("position").and_then(Value::as_str).unwrap_or("").to_owned();
    {
        let mut counts = state.counts.lock().unwrap();
        *counts.per_position.entry(position.clone()).or_default() += 1;
        counts.bodies.push(body);
        state.cv.notify_all();
    }
    if let Some(d) = state.config.delays.get(&position) {
        std::thread::sleep(*d);
    }
    let status = state.config.status.get(&position).copied().unwrap_or(200);
    let payload = json!({ "result": state.config.results.get(&position).cloned().unwrap_or_else(|| json!({})) });
    let text = payload.to_string();
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {status} {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        if status == 200 { "OK" } else { "Error" },
        text.len()
    )?;
    out.flush()
}
