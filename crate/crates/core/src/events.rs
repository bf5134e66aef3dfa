//! Append-only execution trace.
//!
//! Records are numbered gap-free per instance and written as JSON Lines,
//! flushed after every record.

use std::io::{self, Write};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::dsl::PositionId;
use crate::engine::BranchId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    InstanceStart,
    ActivityStart,
    ActivityEnd,
    ContextChange,
    BranchFork,
    BranchEnd,
    BranchJoin,
    CriticalEnter,
    CriticalExit,
    Signal,
    StopAcknowledged,
    InstanceFinish,
    InstanceStop,
    Error,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        matches!(self, EventKind::InstanceFinish | EventKind::InstanceStop)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub wall_time: String,
    pub instance: String,
    pub branch: BranchId,
    pub position: Option<PositionId>,
    pub kind: EventKind,
    pub detail: Json,
}

impl EventRecord {
    pub fn detail_str(&self, key: &str) -> Option<&str> {
        self.detail.get(key).and_then(Json::as_str)
    }

    pub fn is_signal(&self, name: &str) -> bool {
        self.kind == EventKind::Signal && self.detail_str("signal") == Some(name)
    }

    pub fn at(&self, position: &str) -> bool {
        self.position.as_ref().is_some_and(|p| p.as_str() == position)
    }
}

/// Source of `wall_time` stamps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Clock {
    #[default]
    System,
    /// Derived from the sequence number, for byte-reproducible traces.
    Logical,
}

impl Clock {
    fn stamp(self, seq: u64) -> String {
        let t = match self {
            Clock::System => Utc::now(),
            Clock::Logical => DateTime::<Utc>::UNIX_EPOCH + chrono::Duration::milliseconds(seq as i64),
        };
        t.to_rfc3339_opts(SecondsFormat::Millis, true)
    }
}

pub type Observer = Arc<dyn Fn(&EventRecord) + Send + Sync>;

struct LogInner {
    instance: String,
    clock: Clock,
    next_seq: u64,
    records: Vec<EventRecord>,
    writer: Option<Box<dyn Write + Send>>,
    observer: Option<Observer>,
    io_error: Option<io::Error>,
}

pub struct EventLog {
    instance: String,
    inner: Mutex<LogInner>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").finish_non_exhaustive()
    }
}

impl EventLog {
    pub fn new(
        instance: impl Into<String>,
        clock: Clock,
        first_seq: u64,
        writer: Option<Box<dyn Write + Send>>,
        observer: Option<Observer>,
    ) -> Self {
        let instance = instance.into();
        EventLog {
            instance: instance.clone(),
            inner: Mutex::new(LogInner {
                instance,
                clock,
                next_seq: first_seq,
                records: Vec::new(),
                writer,
                observer,
                io_error: None,
            }),
        }
    }

    pub fn instance(&self) -> &str {
        &self.instance
    }

    /// Holding the guard excludes every other emitter.
    pub fn lock(&self) -> LogGuard<'_> {
        LogGuard(self.inner.lock().expect("event log poisoned"))
    }

    pub fn emit(&self, branch: &BranchId, position: Option<&PositionId>, kind: EventKind, detail: Json) -> u64 {
        self.lock().push(branch, position, kind, detail)
    }

    pub fn records(&self) -> Vec<EventRecord> {
        self.lock().0.records.clone()
    }

    pub fn next_seq(&self) -> u64 {
        self.lock().0.next_seq
    }

    pub fn take_io_error(&self) -> Option<io::Error> {
        self.lock().0.io_error.take()
    }
}

pub struct LogGuard<'a>(MutexGuard<'a, LogInner>);

impl LogGuard<'_> {
    pub fn push(&mut self, branch: &BranchId, position: Option<&PositionId>, kind: EventKind, detail: Json) -> u64 {
        let inner = &mut *self.0;
        let seq = inner.next_seq;
        inner.next_seq += 1;
        let record = EventRecord {
            seq,
            wall_time: inner.clock.stamp(seq),
            instance: inner.instance.clone(),
            branch: branch.clone(),
            position: position.cloned(),
            kind,
            detail,
        };
        if let Some(w) = inner.writer.as_mut() {
            let res = serde_json::to_writer(&mut *w, &record)
                .map_err(io::Error::from)
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush());
            if let Err(e) = res {
                inner.io_error.get_or_insert(e);
            }
        }
        if let Some(obs) = &inner.observer {
            obs(&record);
        }
        inner.records.push(record);
        seq
    }
}

/// Reads a JSON Lines trace.
pub fn read_jsonl(text: &str) -> Result<Vec<EventRecord>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[derive(Clone, Default)]
    struct Buf(Arc<Mutex<Vec<u8>>>);

    impl Write for Buf {
        fn write(&mut self, b: &[u8]) -> io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn jsonl_round_trip_and_continuing_seq() {
        let buf = Buf::default();
        let log = EventLog::new("i1", Clock::Logical, 7, Some(Box::new(buf.clone())), None);
        let b = BranchId::root();
        log.emit(&b, None, EventKind::InstanceStart, json!({}));
        log.emit(&b, Some(&PositionId::from("a")), EventKind::ActivityStart, json!({"kind": "manipulate"}));
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        let back = read_jsonl(&text).unwrap();
        assert_eq!(back, log.records());
        assert_eq!(back.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![7, 8]);
        assert_eq!(back[0].wall_time, "1970-01-01T00:00:00.007Z");
        assert!(text.contains("\"kind\":\"activity_start\""));
        assert_eq!(log.next_seq(), 9);
    }
}
