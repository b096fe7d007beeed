//! Properties of the bandwidth allocation and the round-time bounds.

mod common;

use proptest::prelude::*;
use rand::Rng;

use fedlora::protocol::{draw_participants, Plan};
use fedlora::wireless::{
    expected_max_tau, expected_round_time_bound, expected_round_time_tight, realized_round_time, round_time_or_zero,
    scale_times, scaled_fleet_times, ClientProfile,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn water_filling_equalizes_finish_times(
        times in prop::collection::vec((0.01f64..50.0, 0.01f64..500.0), 1..20),
        total in 0.5f64..500.0,
    ) {
        let taus: Vec<f64> = times.iter().map(|t| t.0).collect();
        let ts: Vec<f64> = times.iter().map(|t| t.1).collect();
        let participants: Vec<usize> = (0..times.len()).collect();
        let alloc = realized_round_time(&participants, &taus, &ts, total).unwrap();
        let used: f64 = alloc.bandwidths.iter().sum();
        prop_assert!((used - total).abs() < 1e-9 * total);
        for (n, f) in alloc.bandwidths.iter().enumerate() {
            prop_assert!(*f > 0.0);
            let finish = taus[n] + ts[n] / f;
            prop_assert!((finish - alloc.round_time).abs() <= 1e-9 * alloc.round_time);
        }
    }

    #[test]
    fn expected_max_tau_matches_enumeration(
        pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..100.0), 1..=12),
    ) {
        let q: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let taus: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let closed = expected_max_tau(&q, &taus).unwrap();
        let brute = common::expected_max_tau_brute(&q, &taus);
        prop_assert!((closed - brute).abs() <= 1e-12 * brute.max(1.0));
        let sum: f64 = q.iter().zip(&taus).map(|(q, t)| q * t).sum();
        prop_assert!(closed <= sum + 1e-12 * sum.max(1.0));
    }

    #[test]
    fn scale_times_monotone_with_exact_endpoints(tau in 0.1f64..100.0, t in 0.1f64..100.0, gamma in 1usize..=16) {
        let p = ClientProfile::new(0.5, tau, t).unwrap();
        let (tau_full, t_full) = scale_times(&p, gamma, gamma).unwrap();
        prop_assert_eq!((tau_full, t_full), (tau, t));
        let (tau_one, t_one) = scale_times(&p, 1, gamma).unwrap();
        let g2 = (gamma * gamma) as f64;
        prop_assert!((tau_one - tau / g2).abs() <= 1e-15 * tau && (t_one - t / g2).abs() <= 1e-15 * t);
        let mut prev = 0.0;
        for k in 1..=gamma {
            let (s, _) = scale_times(&p, k, gamma).unwrap();
            prop_assert!(s > prev);
            prev = s;
        }
    }
}

#[test]
fn round_time_ordering_on_random_configs() {
    let mut rng = common::rng(11);
    for _ in 0..20 {
        let n = rng.random_range(2..8);
        let rank = 8;
        let profiles = common::random_fleet(n, &mut rng);
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let k: Vec<usize> = (0..n).map(|_| rng.random_range(1..=rank)).collect();
        let plan = Plan::new(q, k, rank).unwrap();
        let f = rng.random_range(10.0..200.0);
        let (taus, ts) = scaled_fleet_times(&plan, &profiles).unwrap();
        let draws = 20_000;
        let samples: Vec<f64> = (0..draws)
            .map(|r| round_time_or_zero(&draw_participants(&plan, r, &mut rng).participants(), &taus, &ts, f).unwrap())
            .collect();
        let mean = samples.iter().sum::<f64>() / draws as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        let tight = expected_round_time_tight(&plan, &profiles, f).unwrap();
        let loose = expected_round_time_bound(&plan, &profiles, f).unwrap();
        assert!(mean <= tight + 3.0 * se, "mean {mean} > tight {tight} (se {se})");
        assert!(tight <= loose * (1.0 + 1e-12), "tight {tight} > loose {loose}");
    }
}

#[test]
fn empty_round_takes_no_time() {
    assert_eq!(round_time_or_zero(&[], &[1.0], &[1.0], 1.0).unwrap(), 0.0);
}
