//! Optimizes sampling probabilities and sketching ratios for a small fleet
//! with known constants and compares the predicted wall-clock with simple plans.
//!
//! ```text
//! cargo run --release --example plan_optimizer
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedlora::harness::data::{simulate_profiles, ProfileRanges};
use fedlora::planner::{ConvergenceConstants, Planner};
use fedlora::protocol::Plan;

fn main() -> fedlora::Result<()> {
    let (clients, rank) = (12, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let weights: Vec<f64> = (1..=clients).map(|i| i as f64 / (clients * (clients + 1) / 2) as f64).collect();
    let profiles = simulate_profiles(&weights, &ProfileRanges::default(), &mut rng)?;
    let constants = ConvergenceConstants::new(10.0, 1.0, 0.5, 0.3)?;
    let planner = Planner::new(profiles.clone(), constants, 100.0, rank)?;

    let result = planner.alternate(Some(200), 20)?;
    println!("objective trace: {:.2?}", result.trace);
    println!("{:>6} {:>8} {:>10} {:>10} {:>4}", "client", "weight", "tau_full", "t_full", "");
    for (n, p) in profiles.iter().enumerate() {
        println!(
            "{n:>6} {:>8.4} {:>10.2} {:>10.2}   q={:.3} k={}",
            p.weight,
            p.tau_full,
            p.t_full,
            result.plan.q()[n],
            result.plan.k()[n]
        );
    }

    println!("\npredicted wall-clock (rounds estimate x round-time bound):");
    let report = |name: &str, plan: &Plan| match planner.objective(plan) {
        Some(v) => println!("  {name:<22} {v:>10.1}"),
        None => println!("  {name:<22} {:>10}", "infeasible"),
    };
    report("optimized", &result.plan);
    report("full participation", &Plan::full(clients, rank));
    report("fixed q = 0.2", &Plan::homogeneous(clients, 0.2, rank, rank)?);
    report("fixed q = 0.5, k = 4", &Plan::homogeneous(clients, 0.5, 4, rank)?);
    report("weighted q", &Plan::new(weights.clone(), vec![rank; clients], rank)?);
    Ok(())
}
