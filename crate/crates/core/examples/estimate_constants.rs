//! Fits the rounds-to-target constants: first from exact synthetic
//! observations, then from real probe runs on the default scenario,
//! checking the fit against a fifth probe it did not see.
//!
//! ```text
//! cargo run --release --example estimate_constants
//! ```

use fedlora::harness::config::{ExperimentConfig, ProbeSpec};
use fedlora::harness::experiment::{estimate, run_probe, Scenario};
use fedlora::planner::{estimate_constants, sampling_sums, ConvergenceConstants, Planner, ProbeObservation};
use fedlora::protocol::Plan;

fn main() -> fedlora::Result<()> {
    let truth = ConvergenceConstants::new(2.0, 1.0, 0.1, 0.05)?;
    let weights = vec![0.25; 4];
    let plans = [(0.3, 8), (0.8, 8), (0.5, 4), (0.9, 2)].map(|(q, k)| Plan::homogeneous(4, q, k, 8).unwrap());
    let observations = plans.map(|p| {
        let (y, z) = sampling_sums(&p, &weights).unwrap();
        ProbeObservation {
            rounds: truth.a / (truth.b - truth.c * y - truth.d * z),
            y,
            z,
        }
    });
    let fit = estimate_constants(&observations)?;
    println!("synthetic: A={:.6} B={:.6} C={:.6} D={:.6}", fit.a, fit.b, fit.c, fit.d);

    let config = ExperimentConfig::default();
    let scenario = Scenario::build(&config)?;
    let est = estimate(&scenario)?;
    let c = est.constants;
    println!("\nprobe runs to loss {:.3} ({:.0} s simulated):", est.target_loss, est.total_time());
    for p in &est.probes {
        println!("  q={:.2} k={} rounds={:.2} Y={:.4} Z={:.4}", p.q, p.k, p.rounds, p.observation.y, p.observation.z);
    }
    println!("fitted: A={:.4} B={:.4} C={:.4} D={:.4}", c.a, c.b, c.c, c.d);

    let held_out = ProbeSpec { q: 0.3, rank_fraction: 0.75 };
    let (run, _) = run_probe(&scenario, &held_out, est.target_loss, scenario.probe_seed())?;
    let planner = Planner::new(scenario.profiles.clone(), c, config.total_bandwidth, config.rank)?;
    let predicted = planner.rounds_estimate(&Plan::homogeneous(config.clients, run.q, run.k, config.rank)?)?;
    println!(
        "\nheld-out probe q={} k={}: observed {:.2} rounds, predicted {:.2} ({:+.1}%)",
        run.q,
        run.k,
        run.rounds,
        predicted,
        100.0 * (predicted - run.rounds) / run.rounds
    );
    Ok(())
}
