//! `plflow`: command-line front end for the gradient-flow laboratory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use plflow::experiment::emit::{self, Format};
use plflow::experiment::{Experiment, ExperimentConfig, Report};
use plflow::{parallel, Error};

#[derive(Parser)]
#[command(name = "plflow", version, about = "Gradient-flow laboratory for shallow ReLU networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one trajectory and record loss, curvature and audits.
    Simulate(Common),
    /// Convergence probability against the dataset size, with a sigmoid fit.
    SweepConvergence(Common),
    /// Fitted convergence threshold against the dimension or the width.
    SweepThreshold(Common),
    /// Curvature measures at convergence against the dataset size.
    SweepCurvature(Common),
    /// Closed-form group losses in rescaled time and their transitions.
    PhaseTransition(Common),
    /// Frequency of the data assumptions on random draws.
    CheckAssumptions(Common),
    /// Two-point instance that stalls without the balance assumption.
    Counterexample(Common),
    /// Monte-Carlo probability of a good initialization.
    InitProbability(Common),
}

impl Command {
    fn split(self) -> (Experiment, Common) {
        match self {
            Command::Simulate(c) => (Experiment::Simulate, c),
            Command::SweepConvergence(c) => (Experiment::ConvergenceSweep, c),
            Command::SweepThreshold(c) => (Experiment::ThresholdScaling, c),
            Command::SweepCurvature(c) => (Experiment::CurvatureSweep, c),
            Command::PhaseTransition(c) => (Experiment::PhaseTransition, c),
            Command::CheckAssumptions(c) => (Experiment::CheckAssumptions, c),
            Command::Counterexample(c) => (Experiment::Counterexample, c),
            Command::InitProbability(c) => (Experiment::InitProbability, c),
        }
    }
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed for every derived trial seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Main output file; side tables are written next to it.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_name = "csv|json")]
    format: Option<String>,
    /// Trials per point.
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
    /// Integration step.
    #[arg(long, value_name = "REAL")]
    step: Option<f64>,
    /// Full-size defaults instead of desk-scale ones.
    #[arg(long)]
    full_scale: bool,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Also write an SVG plot next to the output.
    #[arg(long)]
    svg: bool,
    /// Log progress to stderr.
    #[arg(short, long)]
    verbose: bool,
}

fn build_config(exp: Experiment, c: &Common) -> plflow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => ExperimentConfig::load(exp, path)?,
        None => ExperimentConfig::new(exp),
    };
    for pair in &c.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{pair}'")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(format) = &c.format {
        cfg.format = Format::parse(format)?;
    }
    if let Some(trials) = c.trials {
        cfg.trials = Some(trials);
    }
    if let Some(step) = c.step {
        cfg.step = Some(step);
    }
    if let Some(out) = &c.out {
        cfg.out = Some(out.clone());
    }
    cfg.full_scale |= c.full_scale;
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(report: &Report, written: &[PathBuf]) {
    println!("{}", report.experiment);
    for (key, value) in &report.summary {
        println!("  {key} = {value}");
    }
    for path in written {
        println!("wrote {}", path.display());
    }
}

fn execute(exp: Experiment, c: &Common) -> plflow::Result<Report> {
    let cfg = build_config(exp, c)?;
    let out = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.{}", exp.label(), cfg.format.extension())));
    info!("running {} with seed {}", exp.label(), cfg.seed);
    let report = plflow::experiment::run(&cfg)?;
    let mut written = emit::emit(&report, &out, cfg.format)?;
    if c.svg {
        match emit::report_svg(&report) {
            Some(svg) => {
                let path = emit::sibling(&out, "svg");
                std::fs::write(&path, svg).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                written.push(path);
            }
            None => warn!("{} has no plot", exp.label()),
        }
    }
    print_summary(&report, &written);
    Ok(report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (exp, common) = cli.command.split();
    let level = if common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Ok(v) = std::env::var("PLFLOW_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                parallel::set_thread_cap(n);
            }
            _ => {
                eprintln!("error: PLFLOW_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(1);
            }
        }
    }
    match execute(exp, &common) {
        Ok(report) if report.audit_failures.is_empty() => ExitCode::SUCCESS,
        Ok(report) => {
            for failure in &report.audit_failures {
                eprintln!("audit: {failure}");
            }
            eprintln!("error: {} invariant audit failure(s)", report.audit_failures.len());
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
