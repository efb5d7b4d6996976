//! `tickwell`: runs an experiment config, or compares two finished runs.
//!
//! Exit codes: 0 clean quiescence (or equal runs), 1 fault (or differing
//! runs), 2 deadlock, 64 invalid config or usage.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tickwell::compare::compare_runs;
use tickwell::config::ExperimentConfig;
use tickwell::error::SimError;
use tickwell::experiment::{Experiment, Invocation, Overrides, RunStatus};
use tickwell::sim::EngineKind;
use tickwell::ticking::TickMode;

const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "tickwell", version, about = "Run a tickwell experiment")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare two runs (output directories or summary files).
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum EngineArg {
    Serial,
    Parallel,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum TickingArg {
    Smart,
    Always,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Worker threads for the parallel engine.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_enum)]
    ticking: Option<TickingArg>,
    /// Enables the monitor on this port (0 picks a free one).
    #[arg(long)]
    monitor_port: Option<u16>,
    /// Directory for relative output paths.
    #[arg(long, env = "TICKWELL_OUT_DIR", default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            engine: self.engine.map(|e| match e {
                EngineArg::Serial => EngineKind::Serial,
                EngineArg::Parallel => EngineKind::Parallel,
            }),
            workers: self.workers,
            ticking: self.ticking.map(|t| match t {
                TickingArg::Smart => TickMode::Smart,
                TickingArg::Always => TickMode::Always,
            }),
            monitor_port: self.monitor_port,
            seed: self.seed,
        }
    }
}

fn config_error(e: &SimError) -> bool {
    matches!(e, SimError::Config { .. } | SimError::Frequency { .. })
}

fn run(args: &RunArgs, config_path: &Path) -> ExitCode {
    let mut cfg = match ExperimentConfig::load(config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("tickwell: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    cfg.apply(&args.overrides());
    let monitor = cfg.monitor.clone();
    let exp = match Experiment::prepare(cfg, &args.out) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("tickwell: {e}");
            return ExitCode::from(if config_error(&e) { EXIT_USAGE } else { 1 });
        }
    };
    let _server = if monitor.enabled {
        match tickwell_monitor::serve(exp.hub(), monitor.port, monitor.static_dir.as_deref()) {
            Ok(s) => {
                eprintln!("monitor: listening on {}", s.url());
                Some(s)
            }
            Err(e) => {
                eprintln!("tickwell: {e}");
                return ExitCode::from(1);
            }
        }
    } else {
        None
    };
    let report = match exp.execute(&Invocation::current()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("tickwell: {e}");
            return ExitCode::from(1);
        }
    };
    let status = match &report.status {
        RunStatus::Clean => "clean",
        RunStatus::Deadlock => "deadlock",
        RunStatus::Fault(_) => "fault",
    };
    println!(
        "status: {status}; final vtime {} ticks; summary {}",
        report.final_vtime_ticks,
        report.outputs.summary.display()
    );
    if let RunStatus::Fault(f) = &report.status {
        eprintln!("{f}");
    }
    if !report.outcome.stuck_buffers.is_empty() {
        println!("stuck buffers:");
        for b in &report.outcome.stuck_buffers {
            println!("  {} {}/{}", b.buffer, b.level, b.capacity);
        }
    }
    for l in &report.outcome.leftovers {
        println!("  leftover {}: {}", l.element, l.detail);
    }
    ExitCode::from(report.exit_code() as u8)
}

fn compare(a: &Path, b: &Path) -> ExitCode {
    match compare_runs(a, b) {
        Ok(c) => {
            print!("{c}");
            if c.is_equal() {
                println!();
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("tickwell compare: {e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match &cli.command {
        Some(Command::Compare { a, b }) => compare(a, b),
        None => match &cli.run.config {
            Some(path) => run(&cli.run, path),
            None => {
                eprintln!("tickwell: --config is required");
                ExitCode::from(EXIT_USAGE)
            }
        },
    }
}
