use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use wee_core::dsl::{parse, validate, walk, Node};
use wee_core::engine::DEFAULT_MAX_ITERATIONS;
use wee_harness::{run_all, RunOptions};

mod control;
mod session;

use control::StopReply;
use session::{ResumeRequest, Settings, EXIT_ERROR};

#[derive(Parser)]
#[command(name = "wee", version, about = "Run and control wee workflows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    /// mock, http, trigger, jump or recursive; defaults to the workflow's own.
    #[arg(long)]
    handler: Option<String>,
    /// Handler configuration: mock script, trigger config or jump table.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Event log, one JSON record per line.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Control socket that `wee stop` talks to.
    #[arg(long)]
    control: Option<PathBuf>,
    /// Where a stopped instance is saved.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Where HTTP results of interrupted calls are kept.
    #[arg(long)]
    passthrough_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
    max_iterations: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    instance: Option<String>,
}

impl RunFlags {
    fn settings(self) -> Settings {
        Settings {
            handler: self.handler,
            script: self.script,
            log: self.log,
            control: self.control,
            save: self.save,
            passthrough_dir: self.passthrough_dir,
            max_iterations: self.max_iterations,
            seed: self.seed,
            instance: self.instance,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute a workflow. Exits 0 when finished, 2 when stopped, 1 on error.
    Run {
        workflow: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Send the stop signal to a running instance.
    Stop {
        #[arg(long)]
        control: PathBuf,
    },
    /// Continue a stopped instance.
    Resume {
        saved: PathBuf,
        /// Defaults to the workflow recorded in the saved instance.
        #[arg(long)]
        workflow: Option<PathBuf>,
        /// Skip every position from `a` to `b` in document order.
        #[arg(long = "skip-region", value_name = "A..B")]
        skip_regions: Vec<String>,
        #[arg(long, value_name = "POSITION")]
        skip: Vec<String>,
        /// Move a branch's thread of control.
        #[arg(long, value_name = "BRANCH=POSITION")]
        at: Vec<String>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Validate a workflow and list its positions.
    Check { workflow: PathBuf },
    /// Run the pattern corpus and compare it with the coverage table.
    Patterns {
        #[arg(long, default_value = "patterns")]
        dir: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        sequential: bool,
    },
}

fn check(path: &Path) -> Result<u8> {
    let source = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ast = match parse(&source) {
        Ok(ast) => ast,
        Err(e) => {
            eprintln!("{}:{e}", path.display());
            return Ok(1);
        }
    };
    let diags = validate(&ast);
    for d in &diags {
        eprintln!("{}: {d}", path.display());
    }
    println!("{:<24} {:<10} path", "position", "kind");
    walk(&ast.body, &mut Vec::new(), &mut |node, path| {
        let kind = match node {
            Node::Call { .. } => "call",
            Node::Manipulate { .. } => "manipulate",
            _ => return,
        };
        if let Some(p) = node.position() {
            let path: Vec<String> = path.iter().map(usize::to_string).collect();
            println!("{:<24} {kind:<10} {}", p.as_str(), path.join("."));
        }
    });
    Ok(u8::from(!diags.is_empty()))
}

fn patterns(dir: &Path, json: Option<&Path>, options: RunOptions) -> Result<u8> {
    let report = run_all(dir, options)?;
    print!("{}", report.render_text());
    if let Some(path) = json {
        std::fs::write(path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(u8::from(!report.all_passed()))
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { workflow, flags } => session::run(&workflow, &flags.settings()),
        Command::Stop { control } => match control::send_stop(&control)? {
            StopReply::Delivered(reply) => {
                println!("{reply}");
                Ok(0)
            }
            StopReply::AlreadyEnded(outcome) => {
                println!("instance already ended ({outcome})");
                Ok(0)
            }
        },
        Command::Resume { saved, workflow, skip_regions, skip, at, flags } => {
            session::resume(&ResumeRequest { saved, workflow, skip_regions, skip, at }, &flags.settings())
        }
        Command::Check { workflow } => check(&workflow),
        Command::Patterns { dir, json, runs, seed, sequential } => {
            patterns(&dir, json.as_deref(), RunOptions { parallel: !sequential, seed, runs })
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
