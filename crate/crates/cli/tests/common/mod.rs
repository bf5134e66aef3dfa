#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use wee_core::events::{read_jsonl, EventKind, EventRecord};

pub fn wee() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wee"))
}

pub fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn exec(args: &[&str]) -> Output {
    wee().args(args).output().expect("wee runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn spawn(args: &[&str]) -> Child {
    wee().args(args).stdout(Stdio::piped()).stderr(Stdio::piped()).spawn().expect("wee starts")
}

pub fn log(path: &Path) -> Vec<EventRecord> {
    read_jsonl(&std::fs::read_to_string(path).unwrap_or_default()).expect("log parses")
}

pub fn started(events: &[EventRecord], pos: &str) -> bool {
    events.iter().any(|e| e.kind == EventKind::ActivityStart && e.at(pos))
}

/// Polls the log until `pred` holds.
pub fn wait_for_log(path: &Path, timeout: Duration, pred: impl Fn(&[EventRecord]) -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if pred(&log(path)) {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    false
}

pub fn wait_exit(mut child: Child, timeout: Duration) -> Option<i32> {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if let Some(status) = child.try_wait().expect("wait works") {
            return status.code();
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    let _ = child.kill();
    None
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
