//! Trace assertions named in case manifests.

use serde::Deserialize;
use serde_json::Value as Json;
use wee_core::events::{EventKind, EventRecord};
use wee_core::expr::{Value, Values};
use wee_core::trace;

/// Which runs of a stopped-and-resumed case an assertion looks at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    #[default]
    All,
    /// Only the run started by the last resume.
    Last,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// Activity starts, in order, equal exactly these positions.
    Sequence {
        positions: Vec<String>,
        #[serde(default)]
        segment: Segment,
    },
    /// The first `before` ends before the first `after` starts.
    Order {
        before: String,
        after: String,
    },
    Count {
        position: String,
        n: usize,
    },
    Absent {
        positions: Vec<String>,
        #[serde(default)]
        segment: Segment,
    },
    Present {
        positions: Vec<String>,
    },
    ExactlyOneOf {
        positions: Vec<String>,
    },
    Forks {
        n: usize,
    },
    /// The first join: branches completed before it, and losers told to quit.
    Join {
        completed_before: usize,
        no_longer_necessary: usize,
    },
    /// Final values, by folding the last run's context changes.
    Context {
        values: Values,
    },
    /// At every start of `position`, `name` held `value`.
    WhileContext {
        position: String,
        name: String,
        value: Value,
    },
    /// The two activities ran at the same time at least once.
    Overlap {
        positions: [String; 2],
    },
    /// No two activity spans overlap anywhere in the trace.
    NoActivityOverlap,
    /// Activities of different branches never interleave.
    BranchesNotInterleaved,
    CriticalExclusion,
    Signals {
        name: String,
        n: usize,
    },
    /// A handler counter, addressed by JSON pointer into its stats.
    Stats {
        pointer: String,
        equals: Json,
    },
}

pub struct Observed<'a> {
    pub events: &'a [EventRecord],
    /// Index where the last resumed run begins.
    pub last_run: usize,
    pub stats: &'a Json,
}

fn starts<'a>(events: &'a [EventRecord], pos: &'a str) -> impl Iterator<Item = usize> + 'a {
    events.iter().enumerate().filter(move |(_, e)| e.kind == EventKind::ActivityStart && e.at(pos)).map(|(i, _)| i)
}

fn fold_context(events: &[EventRecord], upto: usize) -> Values {
    let start = events[..upto].iter().rposition(|e| e.kind == EventKind::InstanceStart).unwrap_or(0);
    let mut values: Values = serde_json::from_value(events[start].detail["context"].clone()).unwrap_or_default();
    for e in &events[start..upto] {
        if e.kind == EventKind::ContextChange {
            if let (Some(name), Ok(v)) = (e.detail_str("name"), serde_json::from_value(e.detail["new"].clone())) {
                values.insert(name.to_owned(), v);
            }
        }
    }
    values
}

impl Assertion {
    /// `None` when the assertion holds, otherwise what went wrong.
    pub fn check(&self, obs: &Observed<'_>) -> Option<String> {
        let all = obs.events;
        let segment = |s: Segment| match s {
            Segment::All => all,
            Segment::Last => &all[obs.last_run..],
        };
        let fail = |msg: String| Some(msg);
        match self {
            Assertion::Sequence { positions, segment: s } => {
                let got = trace::activity_sequence(segment(*s));
                (&got != positions).then(|| format!("activity sequence {got:?}, expected {positions:?}"))
            }
            Assertion::Order { before, after } => {
                let end = all.iter().position(|e| e.kind == EventKind::ActivityEnd && e.at(before));
                let start = starts(all, after).next();
                match (end, start) {
                    (Some(e), Some(s)) if e < s => None,
                    _ => fail(format!("`{before}` does not end before `{after}` starts")),
                }
            }
            Assertion::Count { position, n } => {
                let got = starts(all, position).count();
                (got != *n).then(|| format!("`{position}` started {got} times, expected {n}"))
            }
            Assertion::Absent { positions, segment: s } => {
                let seen = trace::activity_sequence(segment(*s));
                let bad: Vec<_> = positions.iter().filter(|p| seen.contains(p)).collect();
                (!bad.is_empty()).then(|| format!("{bad:?} should not run"))
            }
            Assertion::Present { positions } => {
                let seen = trace::activity_sequence(all);
                let missing: Vec<_> = positions.iter().filter(|p| !seen.contains(p)).collect();
                (!missing.is_empty()).then(|| format!("{missing:?} never ran"))
            }
            Assertion::ExactlyOneOf { positions } => {
                let seen = trace::activity_sequence(all);
                let ran: Vec<_> = positions.iter().filter(|p| seen.contains(p)).collect();
                (ran.len() != 1).then(|| format!("exactly one of {positions:?} should run, got {ran:?}"))
            }
            Assertion::Forks { n } => {
                let got = all.iter().filter(|e| e.kind == EventKind::BranchFork).count();
                (got != *n).then(|| format!("{got} forks, expected {n}"))
            }
            Assertion::Join { completed_before, no_longer_necessary } => {
                let Some(j) = all.iter().position(|e| e.kind == EventKind::BranchJoin) else {
                    return fail("no join".into());
                };
                let done = all[..j]
                    .iter()
                    .filter(|e| e.kind == EventKind::BranchEnd && e.detail_str("status") == Some("completed"))
                    .count();
                let nln = all.iter().filter(|e| e.is_signal("no_longer_necessary")).count();
                (done != *completed_before || nln != *no_longer_necessary).then(|| {
                    format!(
                        "{done} branches completed before the join and {nln} were cancelled, \
                         expected {completed_before} and {no_longer_necessary}"
                    )
                })
            }
            Assertion::Context { values } => {
                let got = fold_context(all, all.len());
                let bad: Vec<_> =
                    values.iter().filter(|(k, v)| got.get(*k) != Some(*v)).map(|(k, v)| (k, v, got.get(k))).collect();
                (!bad.is_empty()).then(|| format!("context mismatches (name, expected, actual): {bad:?}"))
            }
            Assertion::WhileContext { position, name, value } => {
                let idx: Vec<usize> = starts(all, position).collect();
                if idx.is_empty() {
                    return fail(format!("`{position}` never ran"));
                }
                idx.iter().find_map(|&i| {
                    let v = fold_context(all, i);
                    (v.get(name) != Some(value))
                        .then(|| format!("`{position}` started while {name} = {:?}", v.get(name)))
                })
            }
            Assertion::Overlap { positions: [a, b] } => {
                let spans = trace::activity_spans(all);
                let of = |p: &str| spans.iter().filter(|s| s.position == p).cloned().collect::<Vec<_>>();
                let (sa, sb) = (of(a), of(b));
                let any = sa.iter().any(|x| sb.iter().any(|y| x.overlaps(y)));
                (!any).then(|| format!("`{a}` and `{b}` never ran concurrently"))
            }
            Assertion::NoActivityOverlap => {
                let spans = trace::activity_spans(all);
                spans.iter().enumerate().find_map(|(i, x)| {
                    spans[i + 1..]
                        .iter()
                        .find(|y| x.overlaps(y))
                        .map(|y| format!("`{}` overlaps `{}`", x.position, y.position))
                })
            }
            Assertion::BranchesNotInterleaved => {
                let mut seen: Vec<&str> = Vec::new();
                for e in all.iter().filter(|e| e.kind == EventKind::ActivityStart) {
                    let b = e.branch.as_str();
                    if seen.last() != Some(&b) {
                        if seen.contains(&b) {
                            return fail(format!("branch {b} resumed after another branch ran"));
                        }
                        seen.push(b);
                    }
                }
                None
            }
            Assertion::CriticalExclusion => {
                let mut v = trace::check_critical_exclusion(all);
                v.extend(trace::check_section_activity_overlap(all));
                (!v.is_empty()).then(|| v.join("; "))
            }
            Assertion::Signals { name, n } => {
                let got = all.iter().filter(|e| e.is_signal(name)).count();
                (got != *n).then(|| format!("{got} `{name}` signals, expected {n}"))
            }
            Assertion::Stats { pointer, equals } => {
                let got = obs.stats.pointer(pointer);
                (got != Some(equals)).then(|| format!("handler stat {pointer} = {got:?}, expected {equals}"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use wee_core::engine::BranchId;

    fn rec(seq: u64, branch: &str, pos: Option<&str>, kind: EventKind, detail: Json) -> EventRecord {
        EventRecord {
            seq,
            wall_time: String::new(),
            instance: "t".into(),
            branch: BranchId::new(branch),
            position: pos.map(Into::into),
            kind,
            detail,
        }
    }

    fn interleaved() -> Vec<EventRecord> {
        use EventKind::*;
        vec![
            rec(0, "0", None, InstanceStart, json!({"context": {"m": false}})),
            rec(1, "0.1", Some("a"), ActivityStart, json!({})),
            rec(2, "0.2", Some("b"), ActivityStart, json!({})),
            rec(3, "0.1", Some("a"), ActivityEnd, json!({})),
            rec(4, "0.2", Some("b"), ContextChange, json!({"name": "m", "new": true})),
            rec(5, "0.2", Some("b"), ActivityEnd, json!({})),
            rec(6, "0.1", Some("c"), ActivityStart, json!({})),
            rec(7, "0.1", Some("c"), ActivityEnd, json!({})),
        ]
    }

    fn check(a: Assertion) -> Option<String> {
        let ev = interleaved();
        a.check(&Observed { events: &ev, last_run: 0, stats: &json!({"n": {"a": 2}}) })
    }

    #[test]
    fn overlap_detection() {
        assert_eq!(check(Assertion::Overlap { positions: ["a".into(), "b".into()] }), None);
        assert!(check(Assertion::NoActivityOverlap).is_some());
        assert!(check(Assertion::BranchesNotInterleaved).is_some());
    }

    #[test]
    fn context_folding() {
        let v = |b| Assertion::WhileContext { position: "c".into(), name: "m".into(), value: Value::Boolean(b) };
        assert_eq!(check(v(true)), None);
        assert!(check(v(false)).is_some());
        assert_eq!(check(Assertion::Context { values: [("m".to_string(), Value::Boolean(true))].into() }), None);
    }

    #[test]
    fn counts_and_stats() {
        assert_eq!(
            check(Assertion::Sequence { positions: vec!["a".into(), "b".into(), "c".into()], segment: Segment::All }),
            None
        );
        assert_eq!(check(Assertion::Order { before: "a".into(), after: "c".into() }), None);
        assert!(check(Assertion::Order { before: "b".into(), after: "b".into() }).is_some());
        assert_eq!(check(Assertion::Stats { pointer: "/n/a".into(), equals: json!(2) }), None);
        assert!(check(Assertion::ExactlyOneOf { positions: vec!["a".into(), "b".into()] }).is_some());
    }
}
