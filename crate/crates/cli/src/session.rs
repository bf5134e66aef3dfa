use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use wee_core::dsl::{parse, validate, PositionId, WorkflowAst};
use wee_core::engine::{self, BranchId, EngineOptions, Instance, Lifecycle, ResumeOverrides, RunReport, StopAck};
use wee_core::events::EventKind;
use wee_core::handlers::{self, HandlerSpec, HandlerWrapper};
use wee_core::saved::{source_hash, SavedInstance};

use crate::control::ControlListener;

pub const EXIT_FINISHED: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_STOPPED: u8 = 2;

const POLL: Duration = Duration::from_millis(5);

/// Handler and run settings shared by `run` and `resume`.
pub struct Settings {
    pub handler: Option<String>,
    pub script: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub control: Option<PathBuf>,
    pub save: Option<PathBuf>,
    pub passthrough_dir: Option<PathBuf>,
    pub max_iterations: u64,
    pub seed: u64,
    pub instance: Option<String>,
}

pub fn load_workflow(path: &Path) -> Result<(String, WorkflowAst)> {
    let source = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ast = parse(&source).map_err(|e| anyhow!("{}:{e}", path.display()))?;
    let diags = validate(&ast);
    if !diags.is_empty() {
        let lines: Vec<String> = diags.iter().map(|d| format!("{}: {d}", path.display())).collect();
        bail!("{}", lines.join("\n"));
    }
    Ok((source, ast))
}

fn default_save(workflow: &Path) -> PathBuf {
    workflow.with_extension("saved.json")
}

fn passthrough_dir(settings: &Settings, save: &Path) -> PathBuf {
    settings.passthrough_dir.clone().unwrap_or_else(|| {
        let mut s = save.as_os_str().to_owned();
        s.push(".passthrough");
        PathBuf::from(s)
    })
}

fn build_handler(settings: &Settings, ast: &WorkflowAst, save: &Path) -> Result<Arc<dyn HandlerWrapper>> {
    let kind = settings.handler.clone().unwrap_or_else(|| ast.handler.clone());
    let mut spec = HandlerSpec::new(kind).with_seed(settings.seed);
    if let Some(script) = &settings.script {
        spec.config = Some(std::fs::read_to_string(script).with_context(|| format!("reading {}", script.display()))?);
    }
    if spec.kind == "http" {
        let dir = passthrough_dir(settings, save);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        spec.passthrough_dir = Some(dir);
    }
    Ok(handlers::create(&spec)?)
}

fn options(settings: &Settings, source: &str, append: bool, default_id: &str) -> Result<EngineOptions> {
    let log_writer = match &settings.log {
        Some(path) => {
            let file = OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(path)
                .with_context(|| format!("opening log {}", path.display()))?;
            Some(Box::new(file) as Box<dyn std::io::Write + Send>)
        }
        None => None,
    };
    Ok(EngineOptions {
        instance_id: settings.instance.clone().unwrap_or_else(|| default_id.to_owned()),
        max_iterations: settings.max_iterations,
        log_writer,
        workflow_hash: Some(source_hash(source)),
        ..EngineOptions::default()
    })
}

fn supervise(instance: Instance, control: Option<&Path>) -> Result<RunReport> {
    let listener = control.map(ControlListener::bind).transpose()?;
    if let Some(listener) = &listener {
        while !instance.is_terminal() {
            listener.poll(|| match instance.stop() {
                StopAck::Acknowledged => "stop acknowledged".into(),
                StopAck::AlreadyStopping => "already stopping".into(),
                StopAck::Terminal => "instance already ended".into(),
            });
            std::thread::sleep(POLL);
        }
    }
    let report = instance.wait();
    if let Some(listener) = listener {
        listener.finish(lifecycle_name(&report));
    }
    Ok(report)
}

fn lifecycle_name(report: &RunReport) -> &'static str {
    match (report.lifecycle, &report.error) {
        (_, Some(_)) => "error",
        (Lifecycle::Finished, None) => "finished",
        (Lifecycle::Stopped, None) => "stopped",
        _ => "running",
    }
}

/// Reports the outcome, saves a stopped instance and picks the exit code.
fn conclude(
    report: &RunReport,
    handler: &Arc<dyn HandlerWrapper>,
    source: &str,
    workflow: &Path,
    save: &Path,
) -> Result<u8> {
    handler.shutdown();
    let code = match (report.lifecycle, &report.error) {
        (_, Some(e)) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
        (Lifecycle::Finished, None) => EXIT_FINISHED,
        (Lifecycle::Stopped, None) => EXIT_STOPPED,
        (other, None) => bail!("instance ended in state {other:?}"),
    };
    if code == EXIT_STOPPED {
        let mut saved = SavedInstance::new(source, &report.state);
        saved.workflow =
            Some(std::fs::canonicalize(workflow).unwrap_or_else(|_| workflow.to_owned()).display().to_string());
        std::fs::write(save, saved.to_json()).with_context(|| format!("writing {}", save.display()))?;
        eprintln!("stopped; saved to {}", save.display());
    }
    let activities = report.events.iter().filter(|e| e.kind == EventKind::ActivityStart).count();
    eprintln!("{}: {} activities, {} events", lifecycle_name(report), activities, report.events.len());
    Ok(code)
}

pub fn run(workflow: &Path, settings: &Settings) -> Result<u8> {
    let (source, ast) = load_workflow(workflow)?;
    let save = settings.save.clone().unwrap_or_else(|| default_save(workflow));
    let handler = build_handler(settings, &ast, &save)?;
    let stem = workflow.file_stem().and_then(|s| s.to_str()).unwrap_or("instance");
    let options = options(settings, &source, false, stem)?;
    let instance = engine::start(Arc::new(ast), handler.clone(), options)?;
    let report = supervise(instance, settings.control.as_deref())?;
    conclude(&report, &handler, &source, workflow, &save)
}

/// Positions from `a` to `b` inclusive, in document order.
pub fn region(ast: &WorkflowAst, spec: &str) -> Result<Vec<PositionId>> {
    let (a, b) = spec.split_once("..").ok_or_else(|| anyhow!("region `{spec}` is not of the form a..b"))?;
    let all = ast.positions();
    let find = |p: &str| {
        all.iter().position(|x| x.as_str() == p).ok_or_else(|| anyhow!("region bound `{p}` is not a position"))
    };
    let (i, j) = (find(a)?, find(b)?);
    if i > j {
        bail!("region `{spec}` ends before it starts");
    }
    Ok(all[i..=j].to_vec())
}

pub struct ResumeRequest {
    pub saved: PathBuf,
    pub workflow: Option<PathBuf>,
    pub skip_regions: Vec<String>,
    pub skip: Vec<String>,
    pub at: Vec<String>,
}

pub fn resume(request: &ResumeRequest, settings: &Settings) -> Result<u8> {
    let text =
        std::fs::read_to_string(&request.saved).with_context(|| format!("reading {}", request.saved.display()))?;
    let saved = SavedInstance::from_json(&text)?;
    let workflow = request
        .workflow
        .clone()
        .or_else(|| saved.workflow.as_ref().map(PathBuf::from))
        .ok_or_else(|| anyhow!("the saved instance names no workflow; pass --workflow"))?;
    let (source, ast) = load_workflow(&workflow)?;
    let state = saved.into_state(&source)?;

    let mut overrides = ResumeOverrides::default();
    for spec in &request.skip_regions {
        overrides.skip.extend(region(&ast, spec)?);
    }
    let known = ast.position_paths();
    for p in &request.skip {
        let id = PositionId::new(p.as_str());
        if !known.contains_key(&id) {
            bail!("cannot skip `{p}`: not a position");
        }
        overrides.skip.insert(id);
    }
    for spec in &request.at {
        let (branch, pos) =
            spec.split_once('=').ok_or_else(|| anyhow!("`{spec}` is not of the form branch=position"))?;
        overrides.program_counters.insert(BranchId::new(branch), PositionId::new(pos));
    }

    let save = settings.save.clone().unwrap_or_else(|| request.saved.clone());
    let handler = build_handler(settings, &ast, &request.saved)?;
    let options = options(settings, &source, true, &state.instance)?;
    let instance = engine::resume(Arc::new(ast), state, handler.clone(), options, overrides)?;
    let report = supervise(instance, settings.control.as_deref())?;
    conclude(&report, &handler, &source, &workflow, &save)
}
