//! Compares the optimized plan against the sampling and rank baselines on
//! the default scenario and prints simulated wall-clock to the target loss.
//!
//! ```text
//! cargo run --release --example strategy_sweep -- [seed] [config.toml]
//! ```

use std::path::Path;

use fedlora::harness::config::ExperimentConfig;
use fedlora::harness::experiment::{default_sweep_strategies, sweep};

fn main() -> fedlora::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed must be an integer"));
    let mut config = match args.next() {
        Some(path) => ExperimentConfig::load(Path::new(&path))?,
        None => ExperimentConfig::default(),
    };
    config.seed = seed;

    let reports = sweep(&config, &default_sweep_strategies())?;
    if let Some(c) = reports.iter().find_map(|r| r.constants_used) {
        println!("constants: A={:.4} B={:.4} C={:.4} D={:.4}", c.a, c.b, c.c, c.d);
    }
    println!("{:<28} {:>12} {:>8} {:>12} {:>10}", "strategy", "time_s", "rounds", "probe_s", "loss");
    for r in &reports {
        let time = r.wall_clock_to_target.map_or("unreached".to_string(), |t| format!("{t:.1}"));
        let rounds = r.rounds_to_target.map_or("-".to_string(), |n| n.to_string());
        println!(
            "{:<28} {:>12} {:>8} {:>12.1} {:>10.4}",
            r.strategy,
            time,
            rounds,
            r.estimation_time,
            r.final_loss().unwrap_or(f64::NAN)
        );
    }
    if let Some(opt) = reports.first() {
        println!("optimized q: {:?}", opt.plan_used.q().iter().map(|q| (q * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        println!("optimized k: {:?}", opt.plan_used.k());
    }
    Ok(())
}
