//! Command-line front end: estimate constants, plan, run, and sweep strategies.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedlora::harness::config::{ExperimentConfig, Strategy};
use fedlora::harness::experiment::{default_sweep_strategies, estimate, run_strategy, summarize_plan, sweep, Scenario};
use fedlora::harness::report::{emit_estimation, emit_plan, emit_report, emit_sweep, ReportFormat};
use fedlora::planner::ConvergenceConstants;
use fedlora::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Federated LoRA simulator and participation/sketching planner")]
struct Cli {
    /// TOML experiment config; the built-in default scenario when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Output format: csv, json, or both.
    #[arg(long, global = true, default_value = "both")]
    format: ReportFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the probe plans and fit the convergence constants.
    Estimate,
    /// Choose a plan for a strategy and report its predicted cost.
    Plan {
        /// Strategy label, e.g. `optimized`, `uniform`, `fixed:0.2+normal-rank`.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Constants JSON written by `estimate`; estimated afresh when omitted.
        #[arg(long)]
        constants: Option<PathBuf>,
    },
    /// Train one strategy to the target and write its round log and report.
    Run {
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Compare strategies on one scenario (repeat `--strategy`; the default set when omitted).
    Sweep {
        #[arg(long)]
        strategy: Vec<Strategy>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn load_constants(path: &Path) -> Result<ConvergenceConstants> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let c: ConvergenceConstants = serde_json::from_str(&text)?;
    ConvergenceConstants::new(c.a, c.b, c.c, c.d)
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn fmt_time(t: Option<f64>) -> String {
    t.map_or_else(|| "unreached".to_string(), |t| format!("{t:.1}"))
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    match &cli.command {
        Command::Estimate => {
            let scenario = Scenario::build(&config)?;
            let est = estimate(&scenario)?;
            let c = est.constants;
            println!("estimation loss {:.4}, probe time {:.1} s", est.target_loss, est.total_time());
            println!("A={:.6} B={:.6} C={:.6} D={:.6}", c.a, c.b, c.c, c.d);
            print_written(&emit_estimation(&est, &cli.out_dir, cli.format)?);
        }
        Command::Plan { strategy, constants } => {
            let strategy = strategy.unwrap_or(config.strategy);
            let scenario = Scenario::build(&config)?;
            let constants = match constants {
                Some(path) => Some(load_constants(path)?),
                None if strategy.needs_constants() => Some(estimate(&scenario)?.constants),
                None => None,
            };
            let summary = summarize_plan(&scenario, &strategy, constants.as_ref())?;
            let n = summary.plan.len() as f64;
            println!(
                "{}: mean q {:.4}, mean k {:.2}, round-time bound {:.2} s",
                summary.strategy,
                summary.plan.q().iter().sum::<f64>() / n,
                summary.plan.k().iter().sum::<usize>() as f64 / n,
                summary.round_time_bound
            );
            if let (Some(r), Some(o)) = (summary.rounds_estimate, summary.objective) {
                println!("predicted rounds {r:.1}, predicted wall-clock {o:.1} s");
            }
            print_written(&emit_plan(&summary, &cli.out_dir, cli.format)?);
        }
        Command::Run { strategy } => {
            if let Some(s) = strategy {
                config.strategy = *s;
            }
            let scenario = Scenario::build(&config)?;
            let report = run_strategy(&scenario, &config.strategy, None)?;
            let reached = match report.wall_clock_to_target {
                Some(t) => format!("target reached at {t:.1} s"),
                None => "target not reached".to_string(),
            };
            println!(
                "{}: {reached} after {} rounds (estimation {:.1} s){}",
                report.strategy,
                report.records.len(),
                report.estimation_time,
                if report.diverged { ", diverged" } else { "" }
            );
            print_written(&emit_report(&report, &cli.out_dir, cli.format)?);
        }
        Command::Sweep { strategy } => {
            let strategies = if strategy.is_empty() { default_sweep_strategies() } else { strategy.clone() };
            let reports = sweep(&config, &strategies)?;
            println!("{:<28} {:>12} {:>8} {:>12}", "strategy", "time_s", "rounds", "estimation_s");
            for r in &reports {
                println!(
                    "{:<28} {:>12} {:>8} {:>12.1}",
                    r.strategy,
                    fmt_time(r.wall_clock_to_target),
                    r.records.len(),
                    r.estimation_time
                );
            }
            print_written(&emit_sweep(&reports, &cli.out_dir, cli.format)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
