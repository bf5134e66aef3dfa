//! Predicates over execution traces.
//!
//! Every check takes a complete log (possibly several runs of one instance
//! concatenated by resume) and reports violations as readable strings.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde_json::Value as Json;

use crate::context::replay;
use crate::engine::RunReport;
use crate::events::{EventKind, EventRecord};
use crate::expr::Values;

/// Positions of activity starts, in trace order.
pub fn activity_sequence(events: &[EventRecord]) -> Vec<String> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::ActivityStart)
        .filter_map(|e| e.position.as_ref().map(|p| p.to_string()))
        .collect()
}

/// Trace indices of one activity execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivitySpan {
    pub branch: String,
    pub position: String,
    pub start: usize,
    /// Index of the closing record; the start index for unclosed spans.
    pub end: usize,
}

impl ActivitySpan {
    pub fn overlaps(&self, other: &ActivitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

fn closes_activity(e: &EventRecord) -> bool {
    e.kind == EventKind::ActivityEnd
        || e.kind == EventKind::Error
        || e.is_signal("passthrough")
        || e.is_signal("discarded")
}

pub fn activity_spans(events: &[EventRecord]) -> Vec<ActivitySpan> {
    let mut open: HashMap<(&str, &str), usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let Some(pos) = e.position.as_ref() else { continue };
        let key = (e.branch.as_str(), pos.as_str());
        if e.kind == EventKind::ActivityStart {
            open.insert(key, i);
        } else if closes_activity(e) {
            if let Some(start) = open.remove(&key) {
                out.push(ActivitySpan { branch: key.0.into(), position: key.1.into(), start, end: i });
            }
        }
    }
    for ((branch, position), start) in open {
        out.push(ActivitySpan { branch: branch.into(), position: position.into(), start, end: start });
    }
    out.sort_by_key(|s| s.start);
    out
}

/// First and last index of records emitted by `branch`.
pub fn branch_span(events: &[EventRecord], branch: &str) -> Option<(usize, usize)> {
    let mine = |(_, e): &(usize, &EventRecord)| e.branch.as_str() == branch;
    let first = events.iter().enumerate().find(mine)?.0;
    let last = events.iter().enumerate().rfind(mine)?.0;
    Some((first, last))
}

/// Splits a log into runs, each starting at an instance_start record.
pub fn runs(events: &[EventRecord]) -> Vec<&[EventRecord]> {
    let mut starts: Vec<usize> =
        events.iter().enumerate().filter(|(_, e)| e.kind == EventKind::InstanceStart).map(|(i, _)| i).collect();
    if starts.first() != Some(&0) {
        starts.insert(0, 0);
    }
    starts.push(events.len());
    starts.windows(2).map(|w| &events[w[0]..w[1]]).filter(|r| !r.is_empty()).collect()
}

pub fn check_sequence_numbers(events: &[EventRecord]) -> Vec<String> {
    events
        .windows(2)
        .filter(|w| w[1].seq != w[0].seq + 1)
        .map(|w| format!("seq gap: {} followed by {}", w[0].seq, w[1].seq))
        .collect()
}

/// One terminal record per run, as the run's last record; a stopped run
/// carries a stop signal and a finished run leaves no branch unaccounted.
pub fn check_termination(events: &[EventRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for (n, run) in runs(events).into_iter().enumerate() {
        let terminals: Vec<&EventRecord> = run.iter().filter(|e| e.kind.is_terminal()).collect();
        if terminals.len() != 1 {
            out.push(format!("run {n}: {} terminal records", terminals.len()));
            continue;
        }
        if !run.last().is_some_and(|e| e.kind.is_terminal()) {
            out.push(format!("run {n}: records after the terminal record"));
        }
        if terminals[0].kind == EventKind::InstanceStop && !run.iter().any(|e| e.is_signal("stop")) {
            out.push(format!("run {n}: stopped without a stop signal"));
        }
        if terminals[0].kind == EventKind::InstanceFinish {
            let ended: BTreeSet<&str> =
                run.iter().filter(|e| e.kind == EventKind::BranchEnd).map(|e| e.branch.as_str()).collect();
            for f in run.iter().filter(|e| e.kind == EventKind::BranchFork) {
                let child = f.detail_str("child").unwrap_or("");
                if !ended.contains(child) {
                    out.push(format!("run {n}: branch {child} never ended"));
                }
            }
        }
    }
    out
}

/// Within a branch, activities do not overlap, and every start is closed
/// unless the run was stopped.
pub fn check_activity_nesting(events: &[EventRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for (n, run) in runs(events).into_iter().enumerate() {
        let stopped = run.iter().any(|e| e.kind == EventKind::InstanceStop);
        let mut open: BTreeMap<&str, &str> = BTreeMap::new();
        for e in run {
            let Some(pos) = e.position.as_ref().map(|p| p.as_str()) else { continue };
            let b = e.branch.as_str();
            if e.kind == EventKind::ActivityStart {
                if let Some(prev) = open.insert(b, pos) {
                    out.push(format!("run {n}: branch {b} starts `{pos}` while `{prev}` is open"));
                }
            } else if closes_activity(e) {
                match open.remove(b) {
                    Some(p) if p == pos => {}
                    Some(p) => out.push(format!("run {n}: branch {b} closes `{pos}` while `{p}` is open")),
                    None if e.kind == EventKind::ActivityEnd => {
                        out.push(format!("run {n}: branch {b} ends `{pos}` without a start"))
                    }
                    None => {}
                }
            }
        }
        let cancelled: BTreeSet<&str> = run
            .iter()
            .filter(|e| e.kind == EventKind::BranchEnd && e.detail_str("status") != Some("completed"))
            .map(|e| e.branch.as_str())
            .collect();
        for (b, p) in open {
            if !stopped && !cancelled.contains(b) {
                out.push(format!("run {n}: `{p}` on branch {b} never ends"));
            }
        }
    }
    out
}

/// No activity starts after a stop has been acknowledged.
pub fn check_stop_safety(events: &[EventRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for run in runs(events) {
        let mut acked = false;
        for e in run {
            match e.kind {
                EventKind::StopAcknowledged => acked = true,
                EventKind::ActivityStart if acked => {
                    out.push(format!("activity `{}` started after stop (seq {})", pos_of(e), e.seq))
                }
                _ => {}
            }
        }
    }
    out
}

fn pos_of(e: &EventRecord) -> &str {
    e.position.as_ref().map_or("", |p| p.as_str())
}

fn str_list(v: Option<&Json>) -> Vec<String> {
    v.and_then(Json::as_array)
        .map(|a| a.iter().filter_map(|x| x.as_str().map(str::to_owned)).collect())
        .unwrap_or_default()
}

/// Join correctness. For wait-all, the join follows every child's end.
/// For wait-k, exactly k children ended before the join; every other child
/// was told it is no longer necessary and starts nothing afterwards.
pub fn check_joins(events: &[EventRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for (ji, join) in events.iter().enumerate().filter(|(_, e)| e.kind == EventKind::BranchJoin) {
        let children = str_list(join.detail.get("children"));
        let arrived = str_list(join.detail.get("arrived"));
        let ended_before =
            |c: &str| events[..ji].iter().any(|e| e.kind == EventKind::BranchEnd && e.branch.as_str() == c);
        for c in &arrived {
            if !ended_before(c) {
                out.push(format!("join of {} (seq {}) precedes the end of {c}", join.branch, join.seq));
            }
        }
        match join.detail.get("wait") {
            Some(Json::Number(k)) => {
                let k = k.as_u64().unwrap_or(0) as usize;
                let completed_before = children
                    .iter()
                    .filter(|c| {
                        events[..ji].iter().any(|e| {
                            e.kind == EventKind::BranchEnd
                                && e.branch.as_str() == c.as_str()
                                && e.detail_str("status") == Some("completed")
                        })
                    })
                    .count();
                if arrived.len() != k || completed_before != k {
                    out.push(format!(
                        "join of {} (seq {}): {completed_before} branches completed before a wait-{k} join",
                        join.branch, join.seq
                    ));
                }
                for c in children.iter().filter(|c| !arrived.contains(c)) {
                    let nln = events
                        .iter()
                        .position(|e| e.is_signal("no_longer_necessary") && e.detail_str("target") == Some(c.as_str()));
                    match nln {
                        None => out.push(format!("branch {c} lost the race but got no cancellation signal")),
                        Some(i) => {
                            if let Some(late) = events[i..]
                                .iter()
                                .find(|e| e.kind == EventKind::ActivityStart && e.branch.as_str() == c)
                            {
                                out.push(format!("cancelled branch {c} started `{}`", pos_of(late)));
                            }
                        }
                    }
                }
            }
            _ => {
                if arrived.len() != children.len() {
                    out.push(format!(
                        "join of {} (seq {}): wait-all join with {} of {} arrived",
                        join.branch,
                        join.seq,
                        arrived.len(),
                        children.len()
                    ));
                }
            }
        }
    }
    out
}

/// Per section name, enter and exit records alternate and pair up by branch,
/// so no two branches are ever inside sections of the same name at once.
pub fn check_critical_exclusion(events: &[EventRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for run in runs(events) {
        let mut holder: BTreeMap<&str, &str> = BTreeMap::new();
        for e in run {
            let Some(section) = e.detail_str("section") else { continue };
            match e.kind {
                EventKind::CriticalEnter => {
                    if let Some(h) = holder.insert(section, e.branch.as_str()) {
                        out.push(format!("branch {} entered `{section}` while {h} holds it (seq {})", e.branch, e.seq));
                    }
                }
                EventKind::CriticalExit if holder.remove(section) != Some(e.branch.as_str()) => {
                    out.push(format!("branch {} left `{section}` without holding it", e.branch));
                }
                _ => {}
            }
        }
    }
    out
}

/// Activity spans on different branches inside sections of the same name
/// never overlap.
pub fn check_section_activity_overlap(events: &[EventRecord]) -> Vec<String> {
    let mut inside: Vec<(usize, &str)> = Vec::new();
    let mut holder: BTreeMap<&str, &str> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        match (e.kind, e.detail_str("section")) {
            (EventKind::CriticalEnter, Some(s)) => {
                holder.insert(s, e.branch.as_str());
            }
            (EventKind::CriticalExit, Some(s)) => {
                holder.remove(s);
            }
            (EventKind::ActivityStart, _) => {
                if let Some((s, _)) = holder.iter().find(|(_, b)| **b == e.branch.as_str()) {
                    inside.push((i, s));
                }
            }
            _ => {}
        }
    }
    let spans = activity_spans(events);
    let mut out = Vec::new();
    let in_section: Vec<(&ActivitySpan, &str)> =
        spans.iter().filter_map(|s| inside.iter().find(|(i, _)| *i == s.start).map(|(_, sec)| (s, *sec))).collect();
    for (a, (sa, seca)) in in_section.iter().enumerate() {
        for (sb, secb) in &in_section[a + 1..] {
            if seca == secb && sa.branch != sb.branch && sa.overlaps(sb) {
                out.push(format!(
                    "`{}` on {} overlaps `{}` on {} inside `{seca}`",
                    sa.position, sa.branch, sb.position, sb.branch
                ));
            }
        }
    }
    out
}

/// Folding the context changes of each run over the context recorded at
/// its start reproduces the context recorded at a finish.
pub fn check_trace_replay(events: &[EventRecord]) -> Vec<String> {
    let mut out = Vec::new();
    for (n, run) in runs(events).into_iter().enumerate() {
        let Some(start) = run.first().filter(|e| e.kind == EventKind::InstanceStart) else { continue };
        let Ok(mut values) = serde_json::from_value::<Values>(start.detail["context"].clone()) else {
            out.push(format!("run {n}: instance_start carries no context"));
            continue;
        };
        for e in run.iter().filter(|e| e.kind == EventKind::ContextChange) {
            let (Some(name), Ok(new)) = (e.detail_str("name"), serde_json::from_value(e.detail["new"].clone())) else {
                out.push(format!("run {n}: malformed context_change at seq {}", e.seq));
                continue;
            };
            values.insert(name.to_owned(), new);
        }
        if let Some(fin) = run.iter().find(|e| e.kind == EventKind::InstanceFinish) {
            match serde_json::from_value::<Values>(fin.detail["context"].clone()) {
                Ok(expected) if expected == values => {}
                _ => out.push(format!("run {n}: replayed context differs from the final context")),
            }
        }
    }
    out
}

/// Folding the store's change log over its initial values reproduces the
/// final values, and the log's sequence numbers are consecutive.
pub fn check_store_replay(report: &RunReport) -> Vec<String> {
    let store = &report.state.store;
    let mut out = Vec::new();
    if &replay(store.initial_values(), store.change_log()) != store.values() {
        out.push("change log does not replay to the final context".to_owned());
    }
    for (i, r) in store.change_log().iter().enumerate() {
        if r.seq != store.base_version() + i as u64 + 1 {
            out.push(format!("change log seq {} out of order", r.seq));
            break;
        }
    }
    out
}

/// Every structural invariant at once.
pub fn check_all(events: &[EventRecord]) -> Vec<String> {
    let mut out = check_sequence_numbers(events);
    out.extend(check_termination(events));
    out.extend(check_activity_nesting(events));
    out.extend(check_stop_safety(events));
    out.extend(check_joins(events));
    out.extend(check_critical_exclusion(events));
    out.extend(check_trace_replay(events));
    out
}
