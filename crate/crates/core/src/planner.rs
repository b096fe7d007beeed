//! Sampling-probability and sketching-ratio planner.
//!
//! The number of rounds needed to reach a target is modelled as
//! `R = A / (B − C·Y − D·Z)` with `Y = Σ a_n²/q_n` and
//! `Z = Σ (a_n²/q_n)(rank²/k_n²)`, and the expected round time is bounded by
//! `Σ (k_n²/rank²) q_n (t_n/f_tot + τ_n)`. The planner minimizes their
//! product:
//!
//! 1. the lumped constants `A, B, C, D` are recovered from four probe runs
//!    as the null vector of a 4×4 system (SVD);
//! 2. for fixed `k`, the per-round time is pinned to a control value `M`
//!    scanned over a grid, and at each `M` a convex surrogate (harmonic-mean
//!    bound on the rounds factor) is minimized in closed form via its KKT
//!    conditions plus a bisection on the multiplier;
//! 3. for fixed `q`, a greedy pass lowers individual `k_n` while it helps;
//! 4. the two steps alternate until the plan stops changing.

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Plan;
use crate::wireless::{sketch_factor, ClientProfile};

/// Relative margin used to turn the open constraint `q_n > lower_n` into `q_n ≥ lower_n (1 + margin)`.
pub const FEASIBILITY_MARGIN: f64 = 1e-6;
/// Smallest sampling probability the planner will ever emit.
pub const MIN_PROBABILITY: f64 = 1e-9;
/// Rounds estimates above this are treated as unreachable.
pub const MAX_ROUNDS_ESTIMATE: f64 = 1e12;
/// Default number of steps of the control-value grid.
pub const DEFAULT_GRID_STEPS: usize = 200;

/// Lumped constants of the rounds-to-target model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl ConvergenceConstants {
    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        let k = Self { a, b, c, d };
        if [a, b, c, d].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(k)
        } else {
            Err(Error::InconsistentObservations(format!(
                "constants must be positive, got A={a}, B={b}, C={c}, D={d}"
            )))
        }
    }

    /// Same constants multiplied by a positive factor (the model is scale-invariant).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            a: self.a * factor,
            b: self.b * factor,
            c: self.c * factor,
            d: self.d * factor,
        }
    }
}

/// Rounds needed by one homogeneous probe plan, plus its `Y` and `Z` sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeObservation {
    pub rounds: f64,
    pub y: f64,
    pub z: f64,
}

impl ProbeObservation {
    pub fn from_plan(rounds: f64, plan: &Plan, weights: &[f64]) -> Result<Self> {
        if !(rounds >= 1.0 && rounds.is_finite()) {
            return Err(Error::InconsistentObservations(format!(
                "probe needed {rounds} rounds (must be finite and >= 1)"
            )));
        }
        let (y, z) = sampling_sums(plan, weights)?;
        Ok(Self { rounds, y, z })
    }
}

/// `(Y, Z) = (Σ a_n²/q_n, Σ (a_n²/q_n)(rank²/k_n²))`.
pub fn sampling_sums(plan: &Plan, weights: &[f64]) -> Result<(f64, f64)> {
    if weights.len() != plan.len() {
        return Err(Error::Dimension(format!(
            "{} weights for a {}-client plan",
            weights.len(),
            plan.len()
        )));
    }
    let mut y = 0.0;
    let mut z = 0.0;
    for ((a, q), &k) in weights.iter().zip(plan.q()).zip(plan.k()) {
        let term = a * a / q;
        y += term;
        z += term / sketch_factor(k, plan.rank())?;
    }
    Ok((y, z))
}

/// Recovers `(A, B, C, D)` from four probes.
///
/// Each probe gives one row `(1/R_i, −1, Y_i, Z_i)` of a matrix whose null
/// vector is the constants. The right singular vector of the smallest
/// singular value is sign-fixed so `A > 0` and rescaled so `B = 1`.
pub fn estimate_constants(observations: &[ProbeObservation; 4]) -> Result<ConvergenceConstants> {
    let mut m = Matrix4::zeros();
    for (i, o) in observations.iter().enumerate() {
        if !(o.rounds > 0.0 && o.y > 0.0 && o.z > 0.0) {
            return Err(Error::InconsistentObservations(format!(
                "probe {i} has non-positive entries: {o:?}"
            )));
        }
        m[(i, 0)] = 1.0 / o.rounds;
        m[(i, 1)] = -1.0;
        m[(i, 2)] = o.y;
        m[(i, 3)] = o.z;
    }
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let third = svd.singular_values[order[2]];
    if largest <= 0.0 || third <= 1e-10 * largest {
        return Err(Error::DegenerateProbes);
    }
    let mut x = v_t.row(order[3]).transpose();
    if x[0] < 0.0 {
        x = -x;
    }
    if !(x[1] > 0.0) {
        return Err(Error::InconsistentObservations(format!(
            "null vector has non-positive B component ({:.3e})",
            x[1]
        )));
    }
    x /= x[1];
    ConvergenceConstants::new(x[0], x[1], x[2], x[3])
}

/// Per-client lower bounds `a_n² N (C + D K²) / B`, `K² = max_n rank²/k_n²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityBounds {
    pub lower: Vec<f64>,
}

impl FeasibilityBounds {
    pub fn compute(weights: &[f64], k: &[usize], rank: usize, constants: &ConvergenceConstants) -> Result<Self> {
        if weights.len() != k.len() {
            return Err(Error::Dimension(format!(
                "{} weights but {} sketching ratios",
                weights.len(),
                k.len()
            )));
        }
        let mut k_sq: f64 = 0.0;
        for &kn in k {
            k_sq = k_sq.max(1.0 / sketch_factor(kn, rank)?);
        }
        let n = weights.len() as f64;
        let factor = n * (constants.c + constants.d * k_sq) / constants.b;
        Ok(Self {
            lower: weights.iter().map(|a| a * a * factor).collect(),
        })
    }

    /// Smallest admissible `q_n`: the bound plus the open-set margin.
    pub fn min_probability(&self, n: usize) -> f64 {
        (self.lower[n] * (1.0 + FEASIBILITY_MARGIN)).max(MIN_PROBABILITY)
    }

    /// First client that cannot satisfy its bound with any `q_n ≤ 1`.
    pub fn first_infeasible(&self) -> Option<(usize, f64)> {
        (0..self.lower.len())
            .find(|&n| self.min_probability(n) > 1.0)
            .map(|n| (n, self.lower[n]))
    }

    pub fn admits(&self, q: &[f64]) -> bool {
        q.len() == self.lower.len()
            && q.iter()
                .enumerate()
                .all(|(n, &qn)| qn >= self.min_probability(n) && qn <= 1.0)
    }
}

/// Bounds for `k`, failing when some client cannot be made feasible.
pub fn feasibility_bounds(
    weights: &[f64],
    k: &[usize],
    rank: usize,
    constants: &ConvergenceConstants,
) -> Result<FeasibilityBounds> {
    let bounds = FeasibilityBounds::compute(weights, k, rank, constants)?;
    match bounds.first_infeasible() {
        Some((client, lower)) => Err(Error::Infeasible { client, lower }),
        None => Ok(bounds),
    }
}

/// Best `q` found for a fixed `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct QSolution {
    pub q: Vec<f64>,
    /// Exact objective at `(q, k)`.
    pub objective: f64,
    /// Control value (per-round time bound) the solution was found at.
    pub control: f64,
}

/// KKT solution of the convex surrogate at one control value.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSolution {
    pub q: Vec<f64>,
    /// Multiplier of the time-budget constraint.
    pub multiplier: f64,
}

/// Outcome of the alternating optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct AlternationResult {
    pub plan: Plan,
    pub objective: f64,
    /// Objective after each outer iteration (first entry: after the initial q-solve).
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// A fleet, its constants, and the bandwidth budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Planner {
    profiles: Vec<ClientProfile>,
    constants: ConvergenceConstants,
    total_bandwidth: f64,
    rank: usize,
}

impl Planner {
    pub fn new(
        profiles: Vec<ClientProfile>,
        constants: ConvergenceConstants,
        total_bandwidth: f64,
        rank: usize,
    ) -> Result<Self> {
        if profiles.is_empty() {
            return Err(Error::Config("planner needs at least one client".into()));
        }
        if !(total_bandwidth > 0.0) || rank == 0 {
            return Err(Error::Config("bandwidth and rank must be positive".into()));
        }
        Ok(Self {
            profiles,
            constants,
            total_bandwidth,
            rank,
        })
    }

    pub fn clients(&self) -> usize {
        self.profiles.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn profiles(&self) -> &[ClientProfile] {
        &self.profiles
    }

    pub fn constants(&self) -> &ConvergenceConstants {
        &self.constants
    }

    pub fn weights(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p.weight).collect()
    }

    fn denominator(&self, plan: &Plan) -> Result<f64> {
        let (y, z) = sampling_sums(plan, &self.weights())?;
        let k = &self.constants;
        Ok(k.b - k.c * y - k.d * z)
    }

    /// Upper bound on the expected round time (separable form).
    pub fn round_time_bound(&self, plan: &Plan) -> Result<f64> {
        crate::wireless::expected_round_time_bound(plan, &self.profiles, self.total_bandwidth)
    }

    /// `A / (B − C·Y − D·Z)`.
    pub fn rounds_estimate(&self, plan: &Plan) -> Result<f64> {
        let den = self.denominator(plan)?;
        let rounds = self.constants.a / den;
        if den <= 0.0 || !(rounds <= MAX_ROUNDS_ESTIMATE) {
            return Err(Error::NoFeasiblePlan(format!(
                "rounds estimate diverges (denominator {den:.3e})"
            )));
        }
        Ok(rounds)
    }

    /// Rounds estimate times the round-time bound; `None` when the denominator is not positive.
    pub fn objective(&self, plan: &Plan) -> Option<f64> {
        let den = self.denominator(plan).ok()?;
        if !(den > 0.0) {
            return None;
        }
        let time = self.round_time_bound(plan).ok()?;
        Some(self.constants.a / den * time)
    }

    pub fn bounds(&self, k: &[usize]) -> Result<FeasibilityBounds> {
        FeasibilityBounds::compute(&self.weights(), k, self.rank, &self.constants)
    }

    /// `c_n = (k_n²/rank²)(t_n/f_tot + τ_n)`.
    pub fn time_coefficients(&self, k: &[usize]) -> Result<Vec<f64>> {
        self.profiles
            .iter()
            .zip(k)
            .map(|(p, &kn)| Ok(sketch_factor(kn, self.rank)? * p.unit_cost(self.total_bandwidth)))
            .collect()
    }

    /// `d_n = a_n² N² (C + D rank²/k_n²)`.
    pub fn surrogate_offsets(&self, k: &[usize]) -> Result<Vec<f64>> {
        let n = self.clients() as f64;
        let c = &self.constants;
        self.profiles
            .iter()
            .zip(k)
            .map(|(p, &kn)| {
                let inv = 1.0 / sketch_factor(kn, self.rank)?;
                Ok(p.weight * p.weight * n * n * (c.c + c.d * inv))
            })
            .collect()
    }

    /// Harmonic-mean surrogate of the rounds factor: `Σ A q_n / (N B q_n − d_n)`.
    /// `None` if some term has a non-positive denominator.
    pub fn rounds_surrogate(&self, q: &[f64], k: &[usize]) -> Option<f64> {
        let d = self.surrogate_offsets(k).ok()?;
        let nb = self.clients() as f64 * self.constants.b;
        let mut total = 0.0;
        for (&qn, &dn) in q.iter().zip(&d) {
            let den = nb * qn - dn;
            if !(den > 0.0) {
                return None;
            }
            total += self.constants.a * qn / den;
        }
        Some(total)
    }

    /// The grid of control values scanned for fixed `k`.
    ///
    /// The nominal range runs from `N (min k / max k)² min_n(t_n/f_tot + τ_n)`
    /// to `N max_n(t_n/f_tot + τ_n)`. It is widened downwards to the smallest
    /// reachable value `Σ c_n q_n^min` and clipped to the largest reachable
    /// value `Σ c_n`.
    pub fn control_grid(&self, k: &[usize], steps: usize) -> Result<Vec<f64>> {
        let bounds = self.bounds(k)?;
        let c = self.time_coefficients(k)?;
        let n = self.clients() as f64;
        let costs: Vec<f64> = self.profiles.iter().map(|p| p.unit_cost(self.total_bandwidth)).collect();
        let k_min = *k.iter().min().expect("non-empty") as f64;
        let k_max = *k.iter().max().expect("non-empty") as f64;
        let nominal_min = n * (k_min / k_max).powi(2) * costs.iter().copied().fold(f64::INFINITY, f64::min);
        let nominal_max = n * costs.iter().copied().fold(0.0, f64::max);
        let reachable_min: f64 = c.iter().enumerate().map(|(i, ci)| ci * bounds.min_probability(i)).sum();
        let reachable_max: f64 = c.iter().sum();
        let lo = nominal_min.min(reachable_min);
        let hi = nominal_max.min(reachable_max);
        let steps = steps.max(1);
        if hi <= lo {
            return Ok(vec![lo]);
        }
        let step = (hi - lo) / steps as f64;
        Ok((0..=steps).map(|i| if i == steps { hi } else { lo + step * i as f64 }).collect())
    }

    /// Minimizes `Σ A·M·q_n/(N B q_n − d_n)` subject to `Σ c_n q_n = M` and the box
    /// `[q_n^min, 1]`. Returns `None` when the budget is unreachable inside the box.
    pub fn solve_surrogate(&self, k: &[usize], control: f64) -> Result<Option<SurrogateSolution>> {
        let d = self.surrogate_offsets(k)?;
        let nb = self.clients() as f64 * self.constants.b;
        let am = self.constants.a * control;
        self.match_budget(k, control, |n, c, lambda| (d[n] + (am * d[n] / (lambda * c)).sqrt()) / nb)
    }

    /// Minimizes the exact rounds factor at fixed `M`: since the round-time bound is
    /// `Σ c_n q_n = M`, this is `min Σ w_n/q_n` with `w_n = a_n²(C + D rank²/k_n²)`,
    /// whose stationary point is `q_n(λ) = √(w_n/(λ c_n))`.
    pub fn solve_exact(&self, k: &[usize], control: f64) -> Result<Option<SurrogateSolution>> {
        let n = self.clients() as f64;
        let w: Vec<f64> = self.surrogate_offsets(k)?.iter().map(|d| d / (n * n)).collect();
        self.match_budget(k, control, |i, c, lambda| (w[i] / (lambda * c)).sqrt())
    }

    /// Bisects the multiplier so the clipped stationary point `free(n, c_n, λ)` spends
    /// exactly `control`. `free` must be non-increasing in `λ`.
    fn match_budget(
        &self,
        k: &[usize],
        control: f64,
        free: impl Fn(usize, f64, f64) -> f64,
    ) -> Result<Option<SurrogateSolution>> {
        let bounds = self.bounds(k)?;
        if bounds.first_infeasible().is_some() {
            return Ok(None);
        }
        let c = self.time_coefficients(k)?;
        let lo: Vec<f64> = (0..self.clients()).map(|n| bounds.min_probability(n)).collect();

        let budget = |q: &[f64]| -> f64 { q.iter().zip(&c).map(|(q, c)| q * c).sum() };
        let q_at = |lambda: f64| -> Vec<f64> { (0..c.len()).map(|n| free(n, c[n], lambda).clamp(lo[n], 1.0)).collect() };

        let min_budget = budget(&lo);
        let max_budget: f64 = c.iter().sum();
        let tol = 1e-12 * max_budget;
        if control < min_budget - tol || control > max_budget + tol {
            return Ok(None);
        }
        if control >= max_budget - tol {
            return Ok(Some(SurrogateSolution {
                q: vec![1.0; c.len()],
                multiplier: 0.0,
            }));
        }
        if control <= min_budget + tol {
            return Ok(Some(SurrogateSolution {
                q: lo,
                multiplier: f64::INFINITY,
            }));
        }

        // budget(q_at(λ)) is non-increasing in λ; bracket in log space.
        let mut log_lo = 0.0f64;
        let mut log_hi = 0.0f64;
        while budget(&q_at(log_lo.exp())) < control {
            log_lo -= 4.0;
            if log_lo < -700.0 {
                break;
            }
        }
        while budget(&q_at(log_hi.exp())) > control {
            log_hi += 4.0;
            if log_hi > 700.0 {
                break;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (log_lo + log_hi);
            if budget(&q_at(mid.exp())) > control {
                log_lo = mid;
            } else {
                log_hi = mid;
            }
        }
        let lambda = (0.5 * (log_lo + log_hi)).exp();
        Ok(Some(SurrogateSolution {
            q: q_at(lambda),
            multiplier: lambda,
        }))
    }

    /// Line search over the control grid. At each grid point both the surrogate
    /// and the exact stationary points are scored; the candidate with the smallest
    /// exact objective wins (ties: smaller `M`, surrogate first).
    pub fn solve_q_given_k(&self, k: &[usize], steps: Option<usize>) -> Result<QSolution> {
        let weights = self.weights();
        feasibility_bounds(&weights, k, self.rank, &self.constants)?;
        let mut best: Option<QSolution> = None;
        for control in self.control_grid(k, steps.unwrap_or(DEFAULT_GRID_STEPS))? {
            for sol in [self.solve_surrogate(k, control)?, self.solve_exact(k, control)?].into_iter().flatten() {
                let plan = Plan::new(sol.q.clone(), k.to_vec(), self.rank)?;
                let Some(objective) = self.objective(&plan) else {
                    continue;
                };
                if best.as_ref().is_none_or(|b| objective < b.objective) {
                    best = Some(QSolution {
                        q: sol.q,
                        objective,
                        control,
                    });
                }
            }
        }
        best.ok_or_else(|| Error::NoFeasiblePlan("no reachable control value on the grid".into()))
    }

    /// Greedy coordinate descent on `k` at fixed `q`, starting from full rank.
    pub fn greedy_k(&self, q: &[f64]) -> Result<Vec<usize>> {
        let mut k = vec![self.rank; self.clients()];
        let mut current = self
            .objective(&Plan::new(q.to_vec(), k.clone(), self.rank)?)
            .unwrap_or(f64::INFINITY);
        loop {
            let mut updated = false;
            for n in 0..k.len() {
                if k[n] <= 1 {
                    continue;
                }
                let mut candidate = k.clone();
                candidate[n] -= 1;
                if !self.bounds(&candidate)?.admits(q) {
                    continue;
                }
                let plan = Plan::new(q.to_vec(), candidate.clone(), self.rank)?;
                if let Some(value) = self.objective(&plan) {
                    if value < current {
                        k = candidate;
                        current = value;
                        updated = true;
                    }
                }
            }
            if !updated {
                return Ok(k);
            }
        }
    }

    /// Best single-client rank decrement with `q` re-solved for the candidate.
    /// Escapes plans where every decrement is infeasible at the current `q`.
    fn resolving_descent(&self, plan: &Plan, objective: f64, steps: Option<usize>) -> Result<Option<(Plan, f64)>> {
        let mut best: Option<(Plan, f64)> = None;
        for n in 0..plan.len() {
            if plan.k()[n] <= 1 {
                continue;
            }
            let mut k = plan.k().to_vec();
            k[n] -= 1;
            let Ok(sol) = self.solve_q_given_k(&k, steps) else {
                continue;
            };
            if sol.objective < best.as_ref().map_or(objective, |b| b.1) {
                best = Some((Plan::new(sol.q, k, self.rank)?, sol.objective));
            }
        }
        Ok(best)
    }

    /// Alternates q- and k-steps starting from full rank.
    pub fn alternate(&self, steps: Option<usize>, max_iters: usize) -> Result<AlternationResult> {
        let k0 = vec![self.rank; self.clients()];
        let first = self.solve_q_given_k(&k0, steps)?;
        let plan = Plan::new(first.q, k0, self.rank)?;
        self.alternate_from(plan, steps, max_iters)
    }

    /// Alternation from a given feasible plan. A step is accepted only if it
    /// strictly lowers the objective, so the trace is non-increasing.
    pub fn alternate_from(&self, initial: Plan, steps: Option<usize>, max_iters: usize) -> Result<AlternationResult> {
        let mut plan = initial;
        let mut objective = self
            .objective(&plan)
            .filter(|_| self.bounds(plan.k()).map(|b| b.admits(plan.q())).unwrap_or(false))
            .ok_or_else(|| Error::NoFeasiblePlan("initial plan violates the feasibility bounds".into()))?;
        let mut trace = vec![objective];
        let mut iterations = 0;
        while iterations < max_iters {
            iterations += 1;
            let previous = plan.clone();

            if let Ok(sol) = self.solve_q_given_k(plan.k(), steps) {
                if sol.objective < objective {
                    plan = plan.with_q(sol.q)?;
                    objective = sol.objective;
                }
            }

            let k = self.greedy_k(plan.q())?;
            let candidate = plan.with_k(k)?;
            if let Some(value) = self.objective(&candidate) {
                if value < objective && self.bounds(candidate.k())?.admits(candidate.q()) {
                    plan = candidate;
                    objective = value;
                }
            }

            trace.push(objective);
            let q_shift = plan
                .q()
                .iter()
                .zip(previous.q())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if q_shift < 1e-4 && plan.k() == previous.k() {
                match self.resolving_descent(&plan, objective, steps)? {
                    Some((better, value)) => {
                        plan = better;
                        objective = value;
                        *trace.last_mut().expect("non-empty") = objective;
                    }
                    None => break,
                }
            }
        }
        Ok(AlternationResult {
            plan,
            objective,
            trace,
            iterations,
        })
    }
}
