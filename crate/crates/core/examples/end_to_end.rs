//! One optimized run on the default scenario: estimation, planning and
//! training, with the round log and report written to a directory.
//!
//! ```text
//! cargo run --release --example end_to_end -- [out_dir]
//! ```

use std::path::PathBuf;

use fedlora::harness::config::ExperimentConfig;
use fedlora::harness::experiment::run_experiment;
use fedlora::harness::report::{emit_report, ReportFormat};

fn main() -> fedlora::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/end_to_end".into()));
    let config = ExperimentConfig::default();
    let report = run_experiment(&config)?;

    if let Some(est) = &report.estimation {
        let c = est.constants;
        println!("estimation: {:.1} s simulated, A={:.3} B={:.3} C={:.3} D={:.3}", est.total_time(), c.a, c.b, c.c, c.d);
        println!("resuming from the best probe model (loss {:.4})", est.resume_loss);
    }
    let n = report.plan_used.len() as f64;
    println!(
        "plan: mean q {:.3}, mean k {:.2}",
        report.plan_used.q().iter().sum::<f64>() / n,
        report.plan_used.k().iter().sum::<usize>() as f64 / n
    );
    for r in report.records.iter().step_by(10) {
        println!(
            "round {:>4}  {:>2} clients  t={:>8.1} s  loss {:.4}  acc {:.3}",
            r.round,
            r.participants.len(),
            r.cumulative_time,
            r.global_loss,
            r.accuracy
        );
    }
    match report.wall_clock_to_target {
        Some(t) => println!("target reached after {} rounds at {t:.1} s", report.rounds_to_target.unwrap_or(0)),
        None => println!("target not reached within {} rounds", config.round_cap),
    }
    for path in emit_report(&report, &out, ReportFormat::Both)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
