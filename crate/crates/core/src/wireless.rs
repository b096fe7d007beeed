//! Round-time model for clients sharing a fixed total bandwidth.
//!
//! Each participant first computes for `τ_n` seconds and then uploads a
//! payload that takes `t_n` seconds at unit bandwidth. The server splits the
//! total bandwidth `f_tot` so that every participant finishes at the same
//! instant `T`, which is the unique root of `Σ t_n / (T − τ_n) = f_tot` above
//! the slowest computation time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Plan;

/// Static per-client facts measured before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    /// Aggregation weight `|D_n| / |D|`.
    pub weight: f64,
    /// Local computation time at full rank, seconds.
    pub tau_full: f64,
    /// Upload time at full rank under unit bandwidth.
    pub t_full: f64,
}

impl ClientProfile {
    pub fn new(weight: f64, tau_full: f64, t_full: f64) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::Config(format!("client weight {weight} not in (0, 1]")));
        }
        if !(tau_full > 0.0 && tau_full.is_finite() && t_full > 0.0 && t_full.is_finite()) {
            return Err(Error::Config(format!(
                "profile times must be positive (tau = {tau_full}, t = {t_full})"
            )));
        }
        Ok(Self {
            weight,
            tau_full,
            t_full,
        })
    }

    /// Per-round cost at full rank and unit participation: `t/f_tot + τ`.
    pub fn unit_cost(&self, total_bandwidth: f64) -> f64 {
        self.t_full / total_bandwidth + self.tau_full
    }
}

/// Checks that a fleet's weights sum to one.
pub fn validate_fleet(profiles: &[ClientProfile]) -> Result<()> {
    if profiles.is_empty() {
        return Err(Error::Config("fleet has no clients".into()));
    }
    let total: f64 = profiles.iter().map(|p| p.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("client weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// System-wide knobs shared by the time model and the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub total_bandwidth: f64,
    pub rank: usize,
    pub local_steps: usize,
    pub learning_rate: f64,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.total_bandwidth > 0.0 && self.total_bandwidth.is_finite()) {
            return Err(Error::Config("total bandwidth must be positive".into()));
        }
        if self.rank == 0 || self.local_steps == 0 {
            return Err(Error::Config("rank and local steps must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// One simulated training round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub round_time: f64,
    pub cumulative_time: f64,
    pub global_loss: f64,
    pub accuracy: f64,
}

/// Scales full-rank times by `k² / rank²`. Returns `(τ, t)`.
pub fn scale_times(profile: &ClientProfile, k: usize, gamma: usize) -> Result<(f64, f64)> {
    let factor = sketch_factor(k, gamma)?;
    Ok((profile.tau_full * factor, profile.t_full * factor))
}

pub(crate) fn sketch_factor(k: usize, gamma: usize) -> Result<f64> {
    if k == 0 || k > gamma {
        return Err(Error::InvalidSketchRatio { k, gamma });
    }
    let r = k as f64 / gamma as f64;
    Ok(r * r)
}

/// Outcome of the bandwidth split for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub round_time: f64,
    /// Bandwidth per participant, in the order of the participant list.
    pub bandwidths: Vec<f64>,
}

/// Solves `Σ_{n∈participants} t_n / (T − τ_n) = f_tot` for the common finish time.
///
/// The left side is strictly decreasing on `(max τ, ∞)`, so bisection on the
/// bracket `[max τ, max τ + Σ t / f_tot]` converges; a few Newton steps then
/// polish the root to machine precision.
pub fn realized_round_time(
    participants: &[usize],
    taus: &[f64],
    ts: &[f64],
    total_bandwidth: f64,
) -> Result<Allocation> {
    if taus.len() != ts.len() {
        return Err(Error::Dimension(format!(
            "{} computation times but {} upload times",
            taus.len(),
            ts.len()
        )));
    }
    if participants.is_empty() {
        return Err(Error::ProtocolViolation(
            "round time requested for an empty participant set".into(),
        ));
    }
    if !(total_bandwidth > 0.0) {
        return Err(Error::Config("total bandwidth must be positive".into()));
    }
    if let Some(&n) = participants.iter().find(|&&n| n >= taus.len()) {
        return Err(Error::Dimension(format!("participant {n} has no profile")));
    }

    let tau_max = participants.iter().map(|&n| taus[n]).fold(f64::MIN, f64::max);
    let t_sum: f64 = participants.iter().map(|&n| ts[n]).sum();
    let demand = |t: f64| -> f64 {
        participants
            .iter()
            .map(|&n| ts[n] / (t - taus[n]))
            .sum::<f64>()
    };

    let mut lo = tau_max;
    let mut hi = tau_max + t_sum / total_bandwidth;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if demand(mid) > total_bandwidth {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut t = hi;
    for _ in 0..4 {
        let residual = demand(t) - total_bandwidth;
        let slope: f64 = -participants
            .iter()
            .map(|&n| ts[n] / (t - taus[n]).powi(2))
            .sum::<f64>();
        let next = t - residual / slope;
        if !(next > tau_max) || !next.is_finite() {
            break;
        }
        if (demand(next) - total_bandwidth).abs() >= residual.abs() {
            break;
        }
        t = next;
    }

    let bandwidths = participants.iter().map(|&n| ts[n] / (t - taus[n])).collect();
    Ok(Allocation {
        round_time: t,
        bandwidths,
    })
}

/// Round time for a participant set, zero when nobody participates.
pub fn round_time_or_zero(
    participants: &[usize],
    taus: &[f64],
    ts: &[f64],
    total_bandwidth: f64,
) -> Result<f64> {
    if participants.is_empty() {
        Ok(0.0)
    } else {
        Ok(realized_round_time(participants, taus, ts, total_bandwidth)?.round_time)
    }
}

/// Expected slowest computation time among independently sampled clients.
///
/// With clients sorted by `τ`, client `n` is the slowest participant with
/// probability `q_n · Π_{i>n} (1 − q_i)`; the no-participant event contributes 0.
pub fn expected_max_tau(q: &[f64], taus: &[f64]) -> Result<f64> {
    if q.len() != taus.len() {
        return Err(Error::Dimension(format!(
            "{} probabilities but {} computation times",
            q.len(),
            taus.len()
        )));
    }
    let mut order: Vec<usize> = (0..taus.len()).collect();
    order.sort_by(|&i, &j| taus[i].total_cmp(&taus[j]));
    let mut none_slower = 1.0;
    let mut total = 0.0;
    for &n in order.iter().rev() {
        total += none_slower * q[n] * taus[n];
        none_slower *= 1.0 - q[n];
    }
    Ok(total)
}

/// Sketched `(τ_n, t_n)` for every client under a plan.
pub fn scaled_fleet_times(plan: &Plan, profiles: &[ClientProfile]) -> Result<(Vec<f64>, Vec<f64>)> {
    if plan.len() != profiles.len() {
        return Err(Error::Dimension(format!(
            "plan covers {} clients but fleet has {}",
            plan.len(),
            profiles.len()
        )));
    }
    profiles
        .iter()
        .zip(plan.k())
        .map(|(p, &k)| scale_times(p, k, plan.rank()))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().unzip())
}

/// Tighter expected round-time bound: `Σ q_n t_n / f_tot + E[max τ]`.
pub fn expected_round_time_tight(plan: &Plan, profiles: &[ClientProfile], total_bandwidth: f64) -> Result<f64> {
    let (taus, ts) = scaled_fleet_times(plan, profiles)?;
    let comm: f64 = plan.q().iter().zip(&ts).map(|(q, t)| q * t).sum::<f64>() / total_bandwidth;
    Ok(comm + expected_max_tau(plan.q(), &taus)?)
}

/// Looser, separable bound `Σ (k_n²/rank²) q_n (t_n^full / f_tot + τ_n^full)`.
pub fn expected_round_time_bound(plan: &Plan, profiles: &[ClientProfile], total_bandwidth: f64) -> Result<f64> {
    if plan.len() != profiles.len() {
        return Err(Error::Dimension(format!(
            "plan covers {} clients but fleet has {}",
            plan.len(),
            profiles.len()
        )));
    }
    let mut total = 0.0;
    for ((p, &q), &k) in profiles.iter().zip(plan.q()).zip(plan.k()) {
        total += sketch_factor(k, plan.rank())? * q * p.unit_cost(total_bandwidth);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(tau: f64, t: f64) -> ClientProfile {
        ClientProfile::new(0.5, tau, t).unwrap()
    }

    #[test]
    fn scale_times_examples() {
        let p = ClientProfile::new(1.0, 3.5, 8.0).unwrap();
        assert_eq!(scale_times(&p, 4, 4).unwrap(), (3.5, 8.0));
        let (_, t) = scale_times(&p, 2, 4).unwrap();
        assert_eq!(t, 2.0);
        let (tau, _) = scale_times(&p, 3, 8).unwrap();
        assert!((tau - 3.5 * 9.0 / 64.0).abs() < 1e-15);
        assert!(matches!(scale_times(&p, 0, 4), Err(Error::InvalidSketchRatio { .. })));
        assert!(matches!(scale_times(&p, 5, 4), Err(Error::InvalidSketchRatio { .. })));
    }

    #[test]
    fn scale_times_monotone_in_k() {
        let p = profile(2.0, 5.0);
        let times: Vec<_> = (1..=8).map(|k| scale_times(&p, k, 8).unwrap()).collect();
        assert!(times.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 < w[1].1));
    }

    #[test]
    fn single_participant_round_time() {
        let alloc = realized_round_time(&[0], &[1.0], &[10.0], 100.0).unwrap();
        assert!((alloc.round_time - 1.1).abs() < 1e-12);
        assert!((alloc.bandwidths[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_pair_round_time() {
        let alloc = realized_round_time(&[0, 1], &[0.0, 0.0], &[1.0, 1.0], 1.0).unwrap();
        assert!((alloc.round_time - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_participants_rejected() {
        assert!(realized_round_time(&[], &[1.0], &[1.0], 1.0).is_err());
        assert_eq!(round_time_or_zero(&[], &[1.0], &[1.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn expected_max_tau_small_cases() {
        assert_eq!(expected_max_tau(&[1.0], &[3.0]).unwrap(), 3.0);
        assert!((expected_max_tau(&[0.5, 0.5], &[1.0, 2.0]).unwrap() - 1.25).abs() < 1e-15);
        // order of the input does not matter
        assert!((expected_max_tau(&[0.5, 0.5], &[2.0, 1.0]).unwrap() - 1.25).abs() < 1e-15);
        assert!(expected_max_tau(&[0.5], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn homogeneous_full_plan_bound() {
        let profiles = vec![ClientProfile::new(0.25, 2.0, 30.0).unwrap(); 4];
        let plan = Plan::new(vec![1.0; 4], vec![8; 4], 8).unwrap();
        let bound = expected_round_time_bound(&plan, &profiles, 10.0).unwrap();
        assert!((bound - 4.0 * (3.0 + 2.0)).abs() < 1e-12);
        let half = Plan::new(vec![0.5; 4], vec![8; 4], 8).unwrap();
        let halved = expected_round_time_bound(&half, &profiles, 10.0).unwrap();
        assert!((halved - bound / 2.0).abs() < 1e-12);
    }
}
