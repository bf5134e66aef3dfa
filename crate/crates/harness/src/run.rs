use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use wee_core::dsl::{parse, validate, PositionId, WorkflowAst};
use wee_core::engine::{self, BranchId, EngineOptions, Instance, Lifecycle, ResumeOverrides, RunReport};
use wee_core::events::{Clock, EventKind, EventRecord};
use wee_core::handlers::{self, HandlerSpec, HandlerWrapper};
use wee_core::trace;

use crate::case::{load_corpus, CorpusError, EndState, PatternCase, StopWhen};
use crate::check::Observed;
use crate::report::CoverageReport;
use crate::spawn::SpawnHandler;
use crate::table::{table_row, Level, PatternClass, COVERAGE_TABLE};

const STOP_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Serialize)]
pub struct PatternResult {
    pub case: String,
    pub pattern: String,
    pub class: PatternClass,
    /// Level in the published table.
    pub expected: Level,
    /// Level the case demonstrates, if all its checks passed.
    pub achieved: Option<Level>,
    pub runs: usize,
    pub failures: Vec<String>,
    /// Runs whose change log was folded against the final context.
    pub replays: usize,
    pub replay_mismatches: usize,
    pub millis: u128,
}

impl PatternResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.achieved == Some(self.expected)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub parallel: bool,
    /// Added to every case's own seed.
    pub seed: u64,
    /// Replaces every case's repeat count.
    pub runs: Option<usize>,
}

fn handler_for(case: &PatternCase, seed: u64) -> Result<Arc<dyn HandlerWrapper>, String> {
    let m = &case.manifest;
    if m.handler == "spawn" {
        let config = case.script.as_deref().ok_or("spawn handler needs a script")?;
        return SpawnHandler::from_json(config)
            .map(|h| Arc::new(h) as Arc<dyn HandlerWrapper>)
            .map_err(|e| e.to_string());
    }
    let mut spec = HandlerSpec::new(&m.handler).with_seed(seed);
    spec.config = case.script.clone();
    spec.clock = Clock::Logical;
    handlers::create(&spec).map_err(|e| e.to_string())
}

fn stop_ready(events: &[EventRecord], when: &StopWhen) -> bool {
    let started = |p: &PositionId| {
        events.iter().filter(|e| e.kind == EventKind::ActivityStart && e.position.as_ref() == Some(p)).count()
            >= when.times
    };
    let ended =
        |p: &PositionId| events.iter().any(|e| e.kind == EventKind::ActivityEnd && e.position.as_ref() == Some(p));
    when.started.iter().all(started) && when.ended.iter().all(ended)
}

fn wait_then_stop(instance: &Instance, when: &StopWhen) -> Result<(), String> {
    let deadline = Instant::now() + STOP_TIMEOUT;
    while !stop_ready(&instance.events(), when) {
        if instance.is_terminal() {
            return Err("instance ended before the stop condition held".into());
        }
        if Instant::now() > deadline {
            return Err("stop condition never held".into());
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    instance.stop();
    Ok(())
}

struct Outcome {
    events: Vec<EventRecord>,
    last_run: usize,
    last: RunReport,
    stats: serde_json::Value,
}

fn execute(case: &PatternCase, ast: &Arc<WorkflowAst>, seed: u64) -> Result<Outcome, String> {
    let m = &case.manifest;
    let handler = handler_for(case, seed)?;
    let options = || EngineOptions {
        instance_id: case.name.clone(),
        clock: Clock::Logical,
        max_iterations: m.max_iterations.unwrap_or(engine::DEFAULT_MAX_ITERATIONS),
        context_overrides: m.context.clone(),
        ..EngineOptions::default()
    };
    let instance = engine::start(ast.clone(), handler.clone(), options()).map_err(|e| e.to_string())?;
    let Some(controller) = &m.controller else {
        let last = instance.wait();
        handler.shutdown();
        return Ok(Outcome { events: last.events.clone(), last_run: 0, last, stats: handler.stats() });
    };
    let stopped = wait_then_stop(&instance, &controller.stop_when);
    let first = instance.wait();
    stopped?;
    let Some(plan) = &controller.resume else {
        handler.shutdown();
        return Ok(Outcome { events: first.events.clone(), last_run: 0, last: first, stats: handler.stats() });
    };
    if first.lifecycle != Lifecycle::Stopped {
        return Err(format!("expected a stopped instance before resuming, found {:?}", first.lifecycle));
    }
    let overrides = ResumeOverrides {
        program_counters: plan.program_counters.iter().map(|(b, p)| (BranchId::new(b), p.clone())).collect(),
        skip: plan.skip.iter().cloned().collect(),
    };
    let resumed = engine::resume(ast.clone(), first.state.clone(), handler.clone(), options(), overrides)
        .map_err(|e| e.to_string())?
        .wait();
    handler.shutdown();
    let last_run = first.events.len();
    let mut events = first.events;
    events.extend(resumed.events.iter().cloned());
    Ok(Outcome { events, last_run, last: resumed, stats: handler.stats() })
}

/// Runs one case the number of times its manifest asks for.
pub fn run_pattern(case: &PatternCase, options: RunOptions) -> PatternResult {
    let started = Instant::now();
    let m = &case.manifest;
    let expected = table_row(&m.pattern).map_or(m.support, |r| r.level);
    let mut result = PatternResult {
        case: case.name.clone(),
        pattern: m.pattern.clone(),
        class: m.class,
        expected,
        achieved: None,
        runs: 0,
        failures: Vec::new(),
        replays: 0,
        replay_mismatches: 0,
        millis: 0,
    };
    if table_row(&m.pattern).is_none() {
        result.failures.push(format!("`{}` is not a pattern of the coverage table", m.pattern));
    }
    if m.support != expected {
        result.failures.push(format!("manifest declares {}, the table lists {expected}", m.support));
    }

    let Some(source) = &case.source else {
        let rejection = m.unsupported.as_ref().expect("checked on load");
        let refused = match parse(&rejection.attempt) {
            Err(_) => true,
            Ok(ast) => !validate(&ast).is_empty(),
        };
        if refused {
            result.achieved = Some(Level::Orchestrated);
        } else {
            result.failures.push("the engine accepted a workflow it should not be able to express".into());
        }
        result.millis = started.elapsed().as_millis();
        return result;
    };

    let ast = match parse(source) {
        Ok(ast) => Arc::new(ast),
        Err(e) => {
            result.failures.push(format!("parse error: {e}"));
            return result;
        }
    };
    let diags = validate(&ast);
    if !diags.is_empty() {
        result.failures.extend(diags.iter().map(|d| format!("diagnostic: {d}")));
        return result;
    }

    let runs = options.runs.unwrap_or(m.runs).max(1);
    for n in 0..runs {
        let seed = m.seed.wrapping_add(options.seed).wrapping_add(n as u64);
        result.runs += 1;
        let tag = |msg: String| if runs > 1 { format!("run {n} (seed {seed}): {msg}") } else { msg };
        let out = match execute(case, &ast, seed) {
            Ok(o) => o,
            Err(e) => {
                result.failures.push(tag(e));
                break;
            }
        };
        let before = result.failures.len();
        let want = match m.end {
            Some(EndState::Stopped) => Lifecycle::Stopped,
            _ => Lifecycle::Finished,
        };
        if out.last.lifecycle != want {
            result.failures.push(tag(format!("ended {:?}, expected {want:?}", out.last.lifecycle)));
        }
        if let Some(e) = &out.last.error {
            result.failures.push(tag(format!("engine error: {e}")));
        }
        for v in trace::check_all(&out.events) {
            result.failures.push(tag(format!("trace invariant: {v}")));
        }
        result.replays += 1;
        let replay = trace::check_store_replay(&out.last);
        if !replay.is_empty() {
            result.replay_mismatches += 1;
            result.failures.extend(replay.into_iter().map(&tag));
        }
        let obs = Observed { events: &out.events, last_run: out.last_run, stats: &out.stats };
        for a in &m.assertions {
            if let Some(msg) = a.check(&obs) {
                result.failures.push(tag(msg));
            }
        }
        if result.failures.len() > before {
            break;
        }
    }
    if result.failures.is_empty() {
        result.achieved = Some(derived_level(case));
    }
    result.millis = started.elapsed().as_millis();
    result
}

/// The level a passing case demonstrates, read off how it is built: logic
/// placed in a handler or the controller is external, a workflow that
/// emulates the pattern is modified, anything else is direct.
pub fn derived_level(case: &PatternCase) -> Level {
    let m = &case.manifest;
    if case.is_orchestrated() {
        Level::Orchestrated
    } else if m.handler != "mock" || m.controller.as_ref().is_some_and(|c| c.resume.is_some()) {
        Level::HandlerExternal
    } else if m.workaround.is_some() {
        Level::Modified
    } else {
        Level::Direct
    }
}

/// Runs the whole corpus and compares it against the coverage table.
pub fn run_all(root: &Path, options: RunOptions) -> Result<CoverageReport, CorpusError> {
    let started = Instant::now();
    let cases = load_corpus(root)?;
    let missing: Vec<&str> = COVERAGE_TABLE
        .iter()
        .filter(|row| !cases.iter().any(|c| c.manifest.pattern == row.pattern))
        .map(|row| row.pattern)
        .collect();
    if !missing.is_empty() {
        return Err(CorpusError::Missing(missing.join(", ")));
    }
    let results: Vec<PatternResult> = if options.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = cases.iter().map(|c| s.spawn(move || run_pattern(c, options))).collect();
            handles.into_iter().map(|h| h.join().expect("case runner panicked")).collect()
        })
    } else {
        cases.iter().map(|c| run_pattern(c, options)).collect()
    };
    Ok(CoverageReport::new(results, started.elapsed()))
}
