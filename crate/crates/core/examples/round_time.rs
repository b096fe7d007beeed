//! Bandwidth water-filling for one round and the expected round time of a
//! sampling plan: Monte Carlo against the closed-form and separable bounds.
//!
//! ```text
//! cargo run --release --example round_time
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedlora::protocol::{draw_participants, Plan};
use fedlora::wireless::{
    expected_round_time_bound, expected_round_time_tight, realized_round_time, round_time_or_zero,
    scaled_fleet_times, ClientProfile,
};

fn main() -> fedlora::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 8;
    let total_bandwidth = 20.0;
    let profiles = (0..n)
        .map(|_| ClientProfile::new(1.0 / n as f64, rng.random_range(1.0..10.0), rng.random_range(10.0..100.0)))
        .collect::<fedlora::Result<Vec<_>>>()?;
    let taus: Vec<f64> = profiles.iter().map(|p| p.tau_full).collect();
    let ts: Vec<f64> = profiles.iter().map(|p| p.t_full).collect();

    let participants = [0, 2, 5, 7];
    let alloc = realized_round_time(&participants, &taus, &ts, total_bandwidth)?;
    println!("participants {participants:?}: round time {:.4} s", alloc.round_time);
    for (&p, f) in participants.iter().zip(&alloc.bandwidths) {
        println!("  client {p}: bandwidth {f:.4}, finishes at {:.6}", taus[p] + ts[p] / f);
    }
    println!("  bandwidth used {:.6} of {total_bandwidth}", alloc.bandwidths.iter().sum::<f64>());

    let q: Vec<f64> = (0..n).map(|i| 0.2 + 0.1 * i as f64).collect();
    let k: Vec<usize> = (0..n).map(|i| 2 + i % 7).collect();
    let plan = Plan::new(q, k, 8)?;
    let (stau, st) = scaled_fleet_times(&plan, &profiles)?;
    let draws = 50_000;
    let mut total = 0.0;
    for r in 0..draws {
        let draw = draw_participants(&plan, r, &mut rng);
        total += round_time_or_zero(&draw.participants(), &stau, &st, total_bandwidth)?;
    }
    println!("\nexpected round time of a heterogeneous plan");
    println!("  Monte Carlo ({draws} rounds): {:.4}", total / draws as f64);
    println!("  closed-form bound:          {:.4}", expected_round_time_tight(&plan, &profiles, total_bandwidth)?);
    println!("  separable bound:            {:.4}", expected_round_time_bound(&plan, &profiles, total_bandwidth)?);
    Ok(())
}
