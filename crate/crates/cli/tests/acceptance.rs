//! Acceptance criteria, one verdict line each. Exits non-zero if any fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value as Json;
use wee_core::context::Snapshot;
use wee_core::dsl::{parse, WorkflowAst};
use wee_core::engine::{self, EngineOptions, Lifecycle, RunReport};
use wee_core::events::{read_jsonl, Clock, EventKind, EventRecord};
use wee_core::expr::Values;
use wee_core::handlers::trigger::{TriggerBoard, TriggerEvent, TriggerMode};
use wee_core::handlers::{self, CallToken, HandlerCall, HandlerOutcome, HandlerSpec, HandlerWrapper};
use wee_harness::{load_corpus, run_all, Level, RunOptions, COVERAGE_TABLE, PUBLISHED_SUMMARY};
use wee_stub::{StubConfig, StubServer};

mod common;
use common::*;

type Verdict = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn FnOnce() -> Verdict + 'a>);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn starts(events: &[EventRecord]) -> Vec<String> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::ActivityStart)
        .filter_map(|e| e.position.as_ref().map(|p| p.as_str().to_owned()))
        .collect()
}

fn mock(script: &str, seed: u64) -> Arc<dyn HandlerWrapper> {
    handlers::create(&HandlerSpec::new("mock").with_config(script).with_seed(seed)).unwrap()
}

fn logical() -> EngineOptions {
    EngineOptions { clock: Clock::Logical, ..EngineOptions::default() }
}

fn ast(src: &str) -> Arc<WorkflowAst> {
    Arc::new(parse(src).unwrap())
}

fn ac1_booking() -> Verdict {
    let dir = repo().join("workflows");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for script in ["booking_over.json", "booking_under.json"] {
        let text = std::fs::read_to_string(dir.join(script)).map_err(|e| e.to_string())?;
        let cfg: Json = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let cost = |pos: &str, key: &str| cfg["calls"][pos][0]["result"][key].as_i64().unwrap();
        let sum = cost("book_airline", "airline_cost") + cost("book_hotel", "hotel_cost");
        let expected = usize::from(sum > 10000);

        let log_path = tmp.path().join("booking.jsonl");
        let t = Instant::now();
        let out = exec(&[
            "run",
            s(&dir.join("booking.wee")),
            "--handler",
            "mock",
            "--script",
            s(&dir.join(script)),
            "--log",
            s(&log_path),
        ]);
        let took = t.elapsed();
        ensure(code(&out) == 0, format!("{script}: exit {}", code(&out)))?;
        let informed = starts(&log(&log_path)).iter().filter(|p| *p == "inform").count();
        ensure(informed == expected, format!("{script}: sum {sum}, inform ran {informed} times"))?;
        ensure(took < Duration::from_secs(1), format!("{script}: took {took:?}"))?;
        notes.push(format!("sum {sum} → inform×{informed} in {} ms", took.as_millis()));
    }
    Ok(notes.join("; "))
}

fn ac2_coverage(report: &wee_harness::CoverageReport, took: Duration) -> Verdict {
    let mut mismatches = Vec::new();
    for row in &COVERAGE_TABLE {
        match report.results.iter().find(|r| r.pattern == row.pattern) {
            Some(r) if r.achieved == Some(row.level) && r.failures.is_empty() => {}
            Some(r) => {
                mismatches.push(format!("{}: {:?} vs {:?} {:?}", row.pattern, r.achieved, row.level, r.failures))
            }
            None => mismatches.push(format!("{}: no case", row.pattern)),
        }
    }
    ensure(mismatches.is_empty(), mismatches.join("; "))?;
    let total: usize = report.achieved_counts.values().sum();
    ensure(total == 43, format!("{total} cells"))?;
    ensure(took < Duration::from_secs(60), format!("took {took:?}"))?;
    let c = |l| report.achieved_counts[&l];
    let r = &report.recounted_summary;
    let flagged = report.summary_discrepancy.is_some() == ((r.full, r.partial, r.none) != PUBLISHED_SUMMARY);
    ensure(flagged, "summary discrepancy not reported")?;
    Ok(format!(
        "43/43 cells match; ♥♥ {} ♥ {} ✳ {} × {}; published summary {}/{}/{} vs recount {}/{}/{} (discrepancy reported); {} ms",
        c(Level::Direct),
        c(Level::Modified),
        c(Level::HandlerExternal),
        c(Level::Orchestrated),
        PUBLISHED_SUMMARY.0,
        PUBLISHED_SUMMARY.1,
        PUBLISHED_SUMMARY.2,
        r.full,
        r.partial,
        r.none,
        took.as_millis()
    ))
}

fn discriminator(n: usize) -> (String, String) {
    let branches: String = (0..n).map(|i| format!("parallel_branch {{ call: b{i}, endpoint: svc }}\n")).collect();
    let src = format!(
        "workflow {{ handler \"mock\" endpoint svc: \"http://example.org\"\n parallel wait: 1 {{\n{branches} }}\n manipulate: after {{ }} }}"
    );
    let calls: Vec<String> =
        (0..n).map(|i| format!("\"b{i}\": [{{\"delay_ms\": {}}}]", if i == n / 2 { 2 } else { 250 })).collect();
    (src, format!("{{\"calls\": {{{}}}, \"jitter_ms\": [0, 2]}}", calls.join(", ")))
}

fn ac3_discriminator() -> Verdict {
    let mut violations = Vec::new();
    for n in [2usize, 4, 8] {
        let (src, script) = discriminator(n);
        let w = ast(&src);
        for run in 0..100u64 {
            let r = engine::run(w.clone(), mock(&script, run), logical()).map_err(|e| e.to_string())?;
            let ev = &r.events;
            let Some(j) = ev.iter().position(|e| e.kind == EventKind::BranchJoin) else {
                violations.push(format!("N={n} run {run}: no join"));
                continue;
            };
            let ended_before = ev[..j].iter().filter(|e| e.kind == EventKind::BranchEnd).count();
            let completed_before =
                ev[..j].iter().filter(|e| e.kind == EventKind::BranchEnd && e.detail["status"] == "completed").count();
            let nln = ev
                .iter()
                .filter(|e| e.kind == EventKind::Signal && e.detail["signal"] == "no_longer_necessary")
                .count();
            if r.lifecycle != Lifecycle::Finished || ended_before != 1 || completed_before != 1 || nln != n - 1 {
                violations.push(format!(
                    "N={n} run {run}: {:?}, {ended_before} ended before join, {nln} cancelled",
                    r.lifecycle
                ));
            }
        }
    }
    ensure(violations.is_empty(), violations.iter().take(5).cloned().collect::<Vec<_>>().join("; "))?;
    Ok("N ∈ {2, 4, 8} × 100 runs: 1 branch end before the join and N−1 cancellations every time".into())
}

/// Activity intervals by sequence number, paired per branch.
fn spans(events: &[EventRecord]) -> Vec<(String, u64, u64)> {
    let mut open: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut out = Vec::new();
    for e in events {
        let Some(p) = &e.position else { continue };
        let key = (e.branch.to_string(), p.as_str().to_owned());
        match e.kind {
            EventKind::ActivityStart => {
                open.insert(key, e.seq);
            }
            EventKind::ActivityEnd => {
                if let Some(s) = open.remove(&key) {
                    out.push((key.1, s, e.seq));
                }
            }
            _ => {}
        }
    }
    for ((_, p), s) in open {
        out.push((p, s, u64::MAX));
    }
    out
}

fn ac4_interleaved_parallel_routing() -> Verdict {
    let dir = repo().join("patterns/state_based");
    let src = std::fs::read_to_string(dir.join("interleaved_parallel_routing.wee")).map_err(|e| e.to_string())?;
    let script =
        std::fs::read_to_string(dir.join("interleaved_parallel_routing.script.json")).map_err(|e| e.to_string())?;
    let w = ast(&src);
    let workers = 4u64;
    let found: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|k| {
                let (w, script) = (w.clone(), script.clone());
                s.spawn(move || {
                    let mut bad = Vec::new();
                    for seed in (k..1000).step_by(workers as usize) {
                        let r = engine::run(w.clone(), mock(&script, seed), logical()).unwrap();
                        let sp = spans(&r.events);
                        if sp.len() != 6 || r.lifecycle != Lifecycle::Finished {
                            bad.push(format!("seed {seed}: {} spans, {:?}", sp.len(), r.lifecycle));
                        }
                        for i in 0..sp.len() {
                            for j in i + 1..sp.len() {
                                let (a, b) = (&sp[i], &sp[j]);
                                if a.1 < b.2 && b.1 < a.2 {
                                    bad.push(format!("seed {seed}: {} overlaps {}", a.0, b.0));
                                }
                            }
                        }
                    }
                    bad
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    ensure(found.is_empty(), found.iter().take(5).cloned().collect::<Vec<_>>().join("; "))?;
    Ok("1000 seeded runs, 15 span pairs each, 0 overlaps in section s".into())
}

const REGION: [&str; 3] = ["pick", "pack", "label"];

fn ac5_cancel_region() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let template = std::fs::read_to_string(repo().join("workflows/cancel_region.wee")).map_err(|e| e.to_string())?;
    let workflow_for = |stub: &StubServer, name: &str| {
        write(tmp.path(), name, &template.replace("http://127.0.0.1:9292/shop", &stub.url("shop")))
    };

    let plain = StubServer::start(StubConfig::default()).map_err(|e| e.to_string())?;
    let wf = workflow_for(&plain, "plain.wee");
    let out = exec(&["run", s(&wf), "--log", s(&tmp.path().join("plain.jsonl"))]);
    ensure(code(&out) == 0, format!("uninterrupted run exit {}", code(&out)))?;
    let uninterrupted = plain.total();
    let region_calls: usize = REGION.iter().map(|p| plain.count(p)).sum();

    let stub = StubServer::start(StubConfig::default().delay("bill", Duration::from_millis(300)))
        .map_err(|e| e.to_string())?;
    let wf = workflow_for(&stub, "region.wee");
    let (control, save, log_path) =
        (tmp.path().join("ctl"), tmp.path().join("region.saved.json"), tmp.path().join("region.jsonl"));
    let mut child = spawn(&["run", s(&wf), "--control", s(&control), "--save", s(&save), "--log", s(&log_path)]);
    let stop = || {
        ensure(stub.wait_for_count("bill", 1, Duration::from_secs(10)), "bill never requested")?;
        let deadline = Instant::now() + Duration::from_secs(10);
        while !control.exists() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(5));
        }
        ensure(code(&exec(&["stop", "--control", s(&control)])) == 0, "stop failed")
    };
    if let Err(e) = stop() {
        let _ = child.kill();
        let _ = child.wait();
        return Err(e);
    }
    ensure(wait_exit(child, Duration::from_secs(10)) == Some(2), "run did not exit stopped")?;
    let out = exec(&["resume", s(&save), "--skip-region", "pick..label", "--log", s(&log_path)]);
    ensure(code(&out) == 0, format!("resume exit {}: {}", code(&out), String::from_utf8_lossy(&out.stderr)))?;

    let events =
        read_jsonl(&std::fs::read_to_string(&log_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let seen = starts(&events);
    let leaked: Vec<_> = REGION.iter().filter(|p| seen.iter().any(|s| s == *p)).collect();
    ensure(leaked.is_empty(), format!("skipped positions in trace: {leaked:?}"))?;
    let expected = uninterrupted - region_calls;
    ensure(
        stub.total() == expected,
        format!("stub saw {} requests ({:?}), expected {uninterrupted} − {region_calls}", stub.total(), stub.counts()),
    )?;
    ensure(stub.count("bill") == 1, "bill was requested again after resuming")?;
    Ok(format!(
        "{} requests = {uninterrupted} uninterrupted − {region_calls} in region; region absent from {} logged events",
        stub.total(),
        events.len()
    ))
}

#[derive(Clone, Default)]
struct Buffer(Arc<Mutex<Vec<u8>>>);

impl Write for Buffer {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn ac6_arbitrary_cycles() -> Verdict {
    // Traced by hand: the inner loop repeats act3 while j < 2, the outer
    // loop returns to act2 while i < 2.
    let oracle = [
        "act1",
        "act2",
        "act3",
        "check_inner",
        "act3",
        "check_inner",
        "check_outer",
        "act2",
        "act3",
        "check_inner",
        "act3",
        "check_inner",
        "check_outer",
        "act4",
    ];
    let dir = repo().join("patterns/iteration");
    let src = std::fs::read_to_string(dir.join("arbitrary_cycles.wee")).map_err(|e| e.to_string())?;
    let table = std::fs::read_to_string(dir.join("arbitrary_cycles.script.json")).map_err(|e| e.to_string())?;
    let w = ast(&src);
    let mut logs = Vec::new();
    for _ in 0..10 {
        let buf = Buffer::default();
        let handler =
            handlers::create(&HandlerSpec::new("jump").with_config(table.as_str())).map_err(|e| e.to_string())?;
        let options = EngineOptions { log_writer: Some(Box::new(buf.clone())), ..logical() };
        let r: RunReport = engine::run(w.clone(), handler, options).map_err(|e| e.to_string())?;
        ensure(r.lifecycle == Lifecycle::Finished, format!("{:?}", r.error))?;
        ensure(starts(&r.events) == oracle, format!("sequence {:?}", starts(&r.events)))?;
        let bytes = buf.0.lock().unwrap().clone();
        logs.push(bytes);
    }
    ensure(logs.windows(2).all(|p| p[0] == p[1]), "logs differ between runs")?;
    Ok(format!("14-step sequence matches the oracle; 10 logs of {} bytes identical", logs[0].len()))
}

fn ac7_replay(report: &wee_harness::CoverageReport) -> Verdict {
    let replays: usize = report.results.iter().map(|r| r.replays).sum();
    let mismatches: usize = report.results.iter().map(|r| r.replay_mismatches).sum();
    let cases = load_corpus(&corpus()).map_err(|e| e.to_string())?;
    let runnable: usize = cases.iter().filter(|c| !c.is_orchestrated()).map(|c| c.manifest.runs).sum();
    ensure(replays == runnable, format!("{replays} replays for {runnable} runs"))?;
    ensure(mismatches == 0, format!("{mismatches} mismatching runs"))?;
    Ok(format!("{replays} corpus runs replayed, 0 mismatches"))
}

/// A call on `k` from `call_t`, played out on the board in discrete time.
fn board_release(board: &mut TriggerBoard, call_t: u64) -> Option<u64> {
    let mut now = call_t;
    loop {
        if let Some(i) = board.ready("k", call_t, now) {
            board.consume(i);
            return Some(now);
        }
        now = board.next_arrival("k", call_t, now)?;
    }
}

fn live_release(mode: TriggerMode, events: &[TriggerEvent], call_t: u64, horizon: u64) -> Option<u64> {
    let config = serde_json::json!({
        "mode": mode,
        "bindings": { "w": "k" },
        "events": events,
    });
    let handler = handlers::trigger::TriggerHandler::from_json(&config.to_string()).unwrap();
    let epoch = Instant::now();
    std::thread::sleep(Duration::from_millis(call_t));
    let call = HandlerCall {
        position: "w".into(),
        endpoint: "svc".into(),
        parameters: Values::new(),
        context: Snapshot { values: Values::new(), version: 0 },
        passthrough: None,
    };
    let token = CallToken::detached();
    std::thread::scope(|s| {
        let canceller = {
            let token = token.clone();
            s.spawn(move || {
                std::thread::sleep(Duration::from_millis(horizon.saturating_sub(call_t)));
                token.stop();
            })
        };
        let out = handler.call(&call, &token);
        let at = epoch.elapsed().as_millis() as u64;
        token.stop();
        let _ = canceller.join();
        matches!(out, HandlerOutcome::Result(_)).then_some(at)
    })
}

fn ac8_triggers() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut simulated = 0;
    for n in 0..600 {
        let events: Vec<TriggerEvent> = (0..rng.gen_range(0..6))
            .map(|_| TriggerEvent { t: rng.gen_range(0..50), key: if rng.gen_bool(0.7) { "k" } else { "x" }.into() })
            .collect();
        let call_t = rng.gen_range(0..50);
        let matching = || events.iter().filter(|e| e.key == "k").map(|e| e.t);
        let mut reversed = events.clone();
        reversed.reverse();
        let mut rotated = events.clone();
        if !rotated.is_empty() {
            let r = rng.gen_range(0..rotated.len());
            rotated.rotate_left(r);
        }
        for (mode, expected) in [
            (TriggerMode::Persistent, matching().map(|t| t.max(call_t)).min()),
            (TriggerMode::Transient, matching().filter(|&t| t >= call_t).min()),
        ] {
            for order in [&events, &reversed, &rotated] {
                let mut board = TriggerBoard::new(mode);
                for e in order.iter() {
                    board.post(e.clone());
                }
                let got = board_release(&mut board, call_t);
                ensure(got == expected, format!("schedule {n} {mode:?}: released at {got:?}, expected {expected:?}"))?;
            }
            simulated += 1;
        }
    }

    // Wall-clock schedules in 10 ms units, with no event within 30 ms of the call.
    let unit: u64 = 10;
    let live: Vec<String> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4u64)
            .map(|w| {
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(80 + w);
                    let mut bad = Vec::new();
                    for n in 0..10 {
                        let call_t = rng.gen_range(5..15) * unit;
                        let events: Vec<TriggerEvent> = (0..rng.gen_range(1..3))
                            .map(|_| loop {
                                let t = rng.gen_range(0..25) * unit;
                                if t.abs_diff(call_t) >= 3 * unit {
                                    break TriggerEvent { t, key: "k".into() };
                                }
                            })
                            .collect();
                        let mode = if rng.gen_bool(0.5) { TriggerMode::Persistent } else { TriggerMode::Transient };
                        let horizon = 30 * unit;
                        let expected = match mode {
                            TriggerMode::Persistent => events.iter().map(|e| e.t.max(call_t)).min(),
                            TriggerMode::Transient => events.iter().map(|e| e.t).filter(|&t| t >= call_t).min(),
                        };
                        let got = live_release(mode, &events, call_t, horizon);
                        let ok = match (expected, got) {
                            (None, None) => true,
                            (Some(e), Some(g)) => g + 5 >= e && g <= e + 2 * unit,
                            _ => false,
                        };
                        if !ok {
                            bad.push(format!(
                                "live {w}/{n} {mode:?} call {call_t} events {events:?}: {got:?} vs {expected:?}"
                            ));
                        }
                    }
                    bad
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    ensure(live.is_empty(), live.join("; "))?;
    Ok(format!("{simulated} simulated schedules × 3 arrival orders and 40 wall-clock schedules agree with the oracle"))
}

fn corpus() -> std::path::PathBuf {
    repo().join("patterns")
}

fn main() {
    let t = Instant::now();
    let coverage = run_all(Path::new(&corpus()), RunOptions { parallel: true, ..RunOptions::default() });
    let took = t.elapsed();
    let criteria: Vec<Criterion> = vec![
        ("AC1 booking threshold", Box::new(ac1_booking)),
        (
            "AC2 pattern coverage",
            Box::new(|| coverage.as_ref().map_err(|e| e.to_string()).and_then(|r| ac2_coverage(r, took))),
        ),
        ("AC3 cancelling discriminator", Box::new(ac3_discriminator)),
        ("AC4 critical section exclusion", Box::new(ac4_interleaved_parallel_routing)),
        ("AC5 cancel region round trip", Box::new(ac5_cancel_region)),
        ("AC6 arbitrary cycles", Box::new(ac6_arbitrary_cycles)),
        ("AC7 context replay", Box::new(|| coverage.as_ref().map_err(|e| e.to_string()).and_then(ac7_replay))),
        ("AC8 trigger semantics", Box::new(ac8_triggers)),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
