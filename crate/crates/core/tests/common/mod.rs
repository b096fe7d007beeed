//! Shared fixtures and independent reference formulas for the integration tests.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use fedlora::lora::{forward_loss, Batch, LoraState, SketchMatrix};
use fedlora::planner::ConvergenceConstants;
use fedlora::protocol::ClientDataset;
use fedlora::wireless::ClientProfile;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let n = Normal::new(0.0, std).unwrap();
    DMatrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

/// Random state with both factors non-zero.
pub fn random_state(outputs: usize, inputs: usize, rank: usize, rng: &mut impl Rng) -> LoraState {
    LoraState::new(
        gaussian(outputs, inputs, 0.3, rng),
        gaussian(outputs, rank, 0.3, rng),
        gaussian(rank, inputs, 0.3, rng),
    )
    .unwrap()
}

pub fn random_batch(rows: usize, inputs: usize, classes: usize, rng: &mut impl Rng) -> Batch {
    let x = gaussian(rows, inputs, 1.0, rng);
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(x, labels).unwrap()
}

pub fn random_dataset(rows: usize, inputs: usize, classes: usize, rng: &mut impl Rng) -> ClientDataset {
    let b = random_batch(rows, inputs, classes, rng);
    ClientDataset::new(b.inputs().clone(), b.labels().to_vec()).unwrap()
}

/// Random weights summing to one.
pub fn random_weights(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

pub fn random_fleet(n: usize, rng: &mut impl Rng) -> Vec<ClientProfile> {
    random_weights(n, rng)
        .into_iter()
        .map(|w| ClientProfile::new(w, rng.random_range(0.5..20.0), rng.random_range(5.0..200.0)).unwrap())
        .collect()
}

/// Constants small enough that every `q` near one is feasible for small fleets.
pub fn random_constants(rng: &mut impl Rng) -> ConvergenceConstants {
    ConvergenceConstants::new(rng.random_range(1.0..20.0), 1.0, rng.random_range(0.05..0.5), rng.random_range(0.002..0.03))
        .unwrap()
}

/// Predicted wall-clock written out term by term:
/// `A / (B − Σ a²/q (C + D γ²/k²)) · Σ (k²/γ²) q (t/f + τ)`.
pub fn objective_oracle(
    q: &[f64],
    k: &[usize],
    rank: usize,
    profiles: &[ClientProfile],
    total_bandwidth: f64,
    c: &ConvergenceConstants,
) -> Option<f64> {
    let g = rank as f64;
    let mut den = c.b;
    let mut time = 0.0;
    for ((&qn, &kn), p) in q.iter().zip(k).zip(profiles) {
        let ratio = (kn as f64 / g).powi(2);
        den -= p.weight * p.weight / qn * (c.c + c.d / ratio);
        time += ratio * qn * (p.t_full / total_bandwidth + p.tau_full);
    }
    (den > 0.0).then(|| c.a / den * time)
}

/// Central finite difference of the sketched loss with respect to `B[i, j]` (`on_b`) or `A[i, j]`.
pub fn finite_difference(state: &LoraState, sketch: &SketchMatrix, batch: &Batch, on_b: bool, i: usize, j: usize, h: f64) -> f64 {
    let shifted = |delta: f64| {
        let mut b = state.b().clone();
        let mut a = state.a().clone();
        if on_b {
            b[(i, j)] += delta;
        } else {
            a[(i, j)] += delta;
        }
        forward_loss(&state.with_factors(b, a).unwrap(), sketch, batch).unwrap()
    };
    (shifted(h) - shifted(-h)) / (2.0 * h)
}

/// All `k`-subsets of `0..n`.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in start..n {
            cur.push(j);
            go(j + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// `E[max τ]` by summing over all `2^N` participation subsets.
pub fn expected_max_tau_brute(q: &[f64], taus: &[f64]) -> f64 {
    let n = q.len();
    let mut total = 0.0;
    for mask in 0u32..(1 << n) {
        let mut p = 1.0;
        let mut max = 0.0f64;
        for i in 0..n {
            if mask & (1 << i) != 0 {
                p *= q[i];
                max = max.max(taus[i]);
            } else {
                p *= 1.0 - q[i];
            }
        }
        total += p * max;
    }
    total
}
