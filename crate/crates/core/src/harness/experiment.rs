//! End-to-end experiments: scenario construction, probe-based constant
//! estimation, plan selection for every strategy, and simulated training.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, ProbeSpec, RankStrategy, SamplingStrategy, Strategy, Target};
use crate::harness::data::{dirichlet_partition, simulate_profiles};
use crate::lora::{Batch, LoraState};
use crate::planner::{self, ConvergenceConstants, Planner, ProbeObservation};
use crate::protocol::{ClientDataset, Federation, Plan};
use crate::wireless::{ClientProfile, RoundRecord, SystemConfig};

const STREAM_DATA: u64 = 1;
const STREAM_PARTITION: u64 = 2;
const STREAM_PROFILES: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_BASELINE: u64 = 5;
const STREAM_TRAIN: u64 = 6;
const STREAM_WARMUP: u64 = 7;
const STREAM_PROBE: u64 = 16;

fn setup_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    setup_rng(seed, stream).next_u64()
}

/// Data, fleet, and initial model shared by every strategy run from one config.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ExperimentConfig,
    pub clients: Vec<ClientDataset>,
    pub eval: Batch,
    pub profiles: Vec<ClientProfile>,
    pub initial: LoraState,
}

impl Scenario {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let data = config.data.generate(&mut setup_rng(config.seed, STREAM_DATA))?;
        let classes = data.classes;
        let (train, eval) = data.split_eval(config.eval_samples)?;
        let partition = dirichlet_partition(
            &train.labels,
            classes,
            config.clients,
            config.dirichlet_alpha,
            &mut setup_rng(config.seed, STREAM_PARTITION),
        )?;
        let clients = partition.datasets(&train)?;
        let profiles = simulate_profiles(
            &partition.weights,
            &config.profiles,
            &mut setup_rng(config.seed, STREAM_PROFILES),
        )?;
        let initial = LoraState::init(
            classes,
            config.data.features,
            config.rank,
            &mut setup_rng(config.seed, STREAM_INIT),
        );
        Ok(Self {
            config: config.clone(),
            clients,
            eval,
            profiles,
            initial,
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p.weight).collect()
    }

    pub fn system(&self) -> SystemConfig {
        SystemConfig {
            total_bandwidth: self.config.total_bandwidth,
            rank: self.config.rank,
            local_steps: self.config.local_steps,
            learning_rate: self.config.learning_rate,
        }
    }

    /// A fresh federation at the initial model.
    pub fn federation(&self, seed: u64) -> Result<Federation> {
        self.federation_from(self.initial.clone(), seed)
    }

    /// A fresh federation (round 0, clock 0) starting from `state`.
    pub fn federation_from(&self, state: LoraState, seed: u64) -> Result<Federation> {
        Federation::new(
            state,
            self.clients.clone(),
            self.profiles.clone(),
            self.system(),
            self.config.batch_size,
            self.eval.clone(),
            seed,
        )
    }

    pub fn planner(&self, constants: ConvergenceConstants) -> Result<Planner> {
        Planner::new(
            self.profiles.clone(),
            constants,
            self.config.total_bandwidth,
            self.config.rank,
        )
    }

    /// Seed shared by all probe plans, so their participation, sketch and
    /// batch draws are common random numbers and the round counts differ
    /// mainly through the plans themselves.
    pub fn probe_seed(&self) -> u64 {
        derived_seed(self.config.seed, STREAM_PROBE)
    }
}

/// Result of running one probe plan until the estimation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub q: f64,
    pub k: usize,
    /// Rounds until the evaluation loss first reached the estimation target,
    /// linearly interpolated within the crossing round and averaged over repeats.
    pub rounds: f64,
    /// Simulated wall-clock spent on the probe, summed over repeats.
    pub time: f64,
    pub observation: ProbeObservation,
}

/// Fractional crossing point of `target` between the losses before and
/// after round `round` (1-based).
pub fn interpolate_crossing(round: usize, before: f64, after: f64, target: f64) -> f64 {
    let r = round as f64;
    if before > after && before > target {
        r - 1.0 + ((before - target) / (before - after)).clamp(0.0, 1.0)
    } else {
        r
    }
}

/// Model left by a training phase, with its evaluation loss.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub state: LoraState,
    pub loss: f64,
}

impl Checkpoint {
    fn of(fed: &Federation) -> Result<Self> {
        Ok(Self {
            state: fed.state().clone(),
            loss: fed.evaluate()?.0,
        })
    }

    fn better(self, other: Self) -> Self {
        if other.loss < self.loss { other } else { self }
    }
}

fn probe_once(scenario: &Scenario, plan: &Plan, target_loss: f64, seed: u64) -> Result<(f64, Federation)> {
    let cap = scenario.config.planner.probe_round_cap;
    let mut fed = scenario.federation(seed)?;
    let mut before = fed.evaluate()?.0;
    for _ in 0..cap {
        let loss = fed.run_round(plan)?.global_loss;
        if !loss.is_finite() {
            break;
        }
        if loss <= target_loss {
            return Ok((interpolate_crossing(fed.round(), before, loss, target_loss), fed));
        }
        before = loss;
    }
    Err(Error::InconsistentObservations(format!(
        "probe (q = {}, k = {}) did not reach loss {target_loss:.4} within {cap} rounds",
        plan.q()[0],
        plan.k()[0]
    )))
}

/// Runs a homogeneous probe plan from the initial model until the loss is at
/// or below `target_loss`, `probe_repeats` times with seeds derived from `seed`.
/// Also returns the lowest-loss final model of the repeats.
pub fn run_probe(scenario: &Scenario, spec: &ProbeSpec, target_loss: f64, seed: u64) -> Result<(ProbeRun, Checkpoint)> {
    let cfg = &scenario.config;
    let k = spec.k(cfg.rank);
    let plan = Plan::homogeneous(cfg.clients, spec.q, k, cfg.rank)?;
    let repeats = cfg.planner.probe_repeats;
    let mut rounds = 0.0;
    let mut time = 0.0;
    let mut best: Option<Checkpoint> = None;
    for i in 0..repeats {
        let (r, fed) = probe_once(scenario, &plan, target_loss, derived_seed(seed, i as u64))?;
        rounds += r / repeats as f64;
        time += fed.elapsed();
        let ckpt = Checkpoint::of(&fed)?;
        best = Some(match best {
            Some(b) => b.better(ckpt),
            None => ckpt,
        });
    }
    let observation = ProbeObservation::from_plan(rounds, &plan, &scenario.weights())?;
    let run = ProbeRun {
        q: spec.q,
        k,
        rounds,
        time,
        observation,
    };
    Ok((run, best.expect("probe_repeats is validated positive")))
}

/// Output of the parameter-estimation phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimation {
    /// Target loss of every probe (configured, or reached by the warm-up).
    pub target_loss: f64,
    /// Zero when the estimation loss was configured and no warm-up ran.
    pub warmup_time: f64,
    pub probes: Vec<ProbeRun>,
    pub constants: ConvergenceConstants,
    /// Loss of the model an optimized run resumes from.
    pub resume_loss: f64,
}

impl Estimation {
    /// Simulated wall-clock of the warm-up plus all probes.
    pub fn total_time(&self) -> f64 {
        self.warmup_time + self.probes.iter().map(|p| p.time).sum::<f64>()
    }
}

/// Estimation results together with the best model trained along the way.
#[derive(Debug, Clone)]
pub struct EstimationPhase {
    pub estimation: Estimation,
    pub resume: LoraState,
}

/// Full-participation, full-rank warm-up from the initial model.
pub fn warmup(scenario: &Scenario) -> Result<Federation> {
    let cfg = &scenario.config;
    let full = Plan::full(cfg.clients, cfg.rank);
    let mut fed = scenario.federation(derived_seed(cfg.seed, STREAM_WARMUP))?;
    for _ in 0..cfg.planner.warmup_rounds {
        if !fed.run_round(&full)?.global_loss.is_finite() {
            return Err(Error::InconsistentObservations("warm-up diverged".into()));
        }
    }
    Ok(fed)
}

/// Warm-up run to fix the estimation loss (skipped when it is configured
/// explicitly), four probes, then the SVD fit. The lowest-loss model among
/// the warm-up and probe results is kept for resuming.
pub fn estimate_phase(scenario: &Scenario) -> Result<EstimationPhase> {
    let (target_loss, warmup_time, warm) = match scenario.config.planner.estimation_loss {
        Some(loss) => (loss, 0.0, None),
        None => {
            let fed = warmup(scenario)?;
            let ckpt = Checkpoint::of(&fed)?;
            (ckpt.loss, fed.elapsed(), Some(ckpt))
        }
    };
    let results = scenario
        .config
        .planner
        .probes
        .par_iter()
        .map(|spec| run_probe(scenario, spec, target_loss, scenario.probe_seed()))
        .collect::<Result<Vec<_>>>()?;
    let (probes, checkpoints): (Vec<ProbeRun>, Vec<Checkpoint>) = results.into_iter().unzip();
    let observations: [ProbeObservation; 4] = [
        probes[0].observation,
        probes[1].observation,
        probes[2].observation,
        probes[3].observation,
    ];
    let constants = planner::estimate_constants(&observations)?;
    let best = checkpoints
        .into_iter()
        .chain(warm)
        .reduce(Checkpoint::better)
        .expect("four probes");
    Ok(EstimationPhase {
        estimation: Estimation {
            target_loss,
            warmup_time,
            probes,
            constants,
            resume_loss: best.loss,
        },
        resume: best.state,
    })
}

/// [`estimate_phase`] without the resume model.
pub fn estimate(scenario: &Scenario) -> Result<Estimation> {
    Ok(estimate_phase(scenario)?.estimation)
}

/// Sampling probabilities of a baseline strategy (`None` for `Optimized`).
pub fn baseline_q(sampling: SamplingStrategy, weights: &[f64]) -> Option<Vec<f64>> {
    let n = weights.len();
    match sampling {
        SamplingStrategy::Optimized => None,
        SamplingStrategy::Full => Some(vec![1.0; n]),
        SamplingStrategy::Fixed(p) => Some(vec![p; n]),
        SamplingStrategy::Uniform => Some(vec![1.0 / n as f64; n]),
        SamplingStrategy::Weighted => Some(weights.to_vec()),
    }
}

/// Sketching ratios of a baseline rank strategy (`None` for `Optimized`).
pub fn baseline_k<R: Rng + ?Sized>(rank_strategy: RankStrategy, clients: usize, rank: usize, rng: &mut R) -> Option<Vec<usize>> {
    let to_ratio = |x: f64| (x.round() as usize).clamp(1, rank);
    let gamma = rank as f64;
    match rank_strategy {
        RankStrategy::Optimized => None,
        RankStrategy::Full => Some(vec![rank; clients]),
        RankStrategy::Uniform => Some((0..clients).map(|_| to_ratio(rng.random_range(0.0..=gamma))).collect()),
        RankStrategy::Normal { mean, std } => {
            let normal = Normal::new(mean.unwrap_or(gamma / 2.0), std.unwrap_or(gamma / 4.0)).expect("validated std");
            Some(
                (0..clients)
                    .map(|_| loop {
                        let x = normal.sample(rng);
                        if (0.0..=gamma).contains(&x) {
                            break to_ratio(x);
                        }
                    })
                    .collect(),
            )
        }
    }
}

/// Plan of a strategy with no optimized component.
pub fn make_baseline_plan<R: Rng + ?Sized>(strategy: &Strategy, weights: &[f64], rank: usize, rng: &mut R) -> Result<Plan> {
    let q = baseline_q(strategy.sampling, weights);
    let k = baseline_k(strategy.rank, weights.len(), rank, rng);
    match (q, k) {
        (Some(q), Some(k)) => Plan::new(q, k, rank),
        _ => Err(Error::Config(format!("strategy {strategy} has an optimized component"))),
    }
}

/// Picks the plan for `strategy`, solving for whichever parts are optimized.
pub fn choose_plan(scenario: &Scenario, strategy: &Strategy, constants: Option<&ConvergenceConstants>) -> Result<Plan> {
    let cfg = &scenario.config;
    let weights = scenario.weights();
    let mut rng = setup_rng(cfg.seed, STREAM_BASELINE);
    let q = baseline_q(strategy.sampling, &weights);
    let k = baseline_k(strategy.rank, cfg.clients, cfg.rank, &mut rng);
    if let (Some(q), Some(k)) = (&q, &k) {
        return Plan::new(q.clone(), k.clone(), cfg.rank);
    }
    let constants = constants
        .ok_or_else(|| Error::Config(format!("strategy {strategy} needs convergence constants")))?;
    let planner = scenario.planner(*constants)?;
    let steps = Some(cfg.planner.grid_steps);
    match (q, k) {
        (None, None) => Ok(planner.alternate(steps, cfg.planner.max_iters)?.plan),
        (None, Some(k)) => Plan::new(planner.solve_q_given_k(&k, steps)?.q, k, cfg.rank),
        (Some(q), None) => {
            planner::feasibility_bounds(&weights, &vec![cfg.rank; cfg.clients], cfg.rank, constants)?;
            if !planner.bounds(&vec![cfg.rank; cfg.clients])?.admits(&q) {
                return Err(Error::NoFeasiblePlan(format!(
                    "baseline sampling {} violates the feasibility bounds at full rank",
                    strategy.sampling
                )));
            }
            let k = planner.greedy_k(&q)?;
            Plan::new(q, k, cfg.rank)
        }
        (Some(_), Some(_)) => unreachable!("handled above"),
    }
}

/// A chosen plan with the model's predictions for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub strategy: String,
    pub constants: Option<ConvergenceConstants>,
    pub plan: Plan,
    /// Predicted rounds to the target (needs constants and a feasible plan).
    pub rounds_estimate: Option<f64>,
    /// Upper bound on the expected round time, seconds.
    pub round_time_bound: f64,
    /// Predicted wall-clock: rounds estimate times round-time bound.
    pub objective: Option<f64>,
}

/// Chooses the plan for `strategy` and evaluates the model's predictions.
pub fn summarize_plan(scenario: &Scenario, strategy: &Strategy, constants: Option<&ConvergenceConstants>) -> Result<PlanSummary> {
    strategy.validate()?;
    let plan = choose_plan(scenario, strategy, constants)?;
    let round_time_bound =
        crate::wireless::expected_round_time_bound(&plan, &scenario.profiles, scenario.config.total_bandwidth)?;
    let (rounds_estimate, objective) = match constants {
        Some(c) => {
            let planner = scenario.planner(*c)?;
            let rounds = planner.rounds_estimate(&plan).ok().filter(|r| r.is_finite());
            (rounds, planner.objective(&plan))
        }
        None => (None, None),
    };
    Ok(PlanSummary {
        strategy: strategy.to_string(),
        constants: constants.copied(),
        plan,
        rounds_estimate,
        round_time_bound,
        objective,
    })
}

/// Everything a run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub seed: u64,
    pub target: Target,
    pub plan_used: Plan,
    pub constants_used: Option<ConvergenceConstants>,
    pub estimation: Option<Estimation>,
    /// Simulated seconds spent before the first training round (warm-up and
    /// probes). Optimized runs resume from the best model estimation produced.
    pub estimation_time: f64,
    /// Cumulative time of the first record meeting the target.
    pub wall_clock_to_target: Option<f64>,
    pub rounds_to_target: Option<usize>,
    /// The evaluation loss became non-finite; the offending round is not recorded.
    pub diverged: bool,
    pub records: Vec<RoundRecord>,
}

impl RunReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.global_loss)
    }
}

/// Trains under a fixed plan until the target or the round cap.
pub fn execute_plan(
    scenario: &Scenario,
    strategy: &Strategy,
    plan: Plan,
    phase: Option<EstimationPhase>,
) -> Result<RunReport> {
    let cfg = &scenario.config;
    let (estimation, start) = match phase {
        Some(p) => (Some(p.estimation), p.resume),
        None => (None, scenario.initial.clone()),
    };
    let estimation_time = estimation.as_ref().map_or(0.0, Estimation::total_time);
    let mut fed = scenario
        .federation_from(start, derived_seed(cfg.seed, STREAM_TRAIN))?
        .with_elapsed(estimation_time);
    let mut reached = None;
    let mut diverged = false;
    for _ in 0..cfg.round_cap {
        let rec = fed.run_round(&plan)?;
        if !rec.global_loss.is_finite() {
            diverged = true;
            break;
        }
        if cfg.target.reached(rec.global_loss, rec.accuracy) {
            reached = Some((rec.cumulative_time, rec.round + 1));
            break;
        }
    }
    let mut records = fed.into_records();
    if diverged {
        records.pop();
    }
    Ok(RunReport {
        strategy: strategy.to_string(),
        seed: cfg.seed,
        target: cfg.target,
        plan_used: plan,
        constants_used: estimation.as_ref().map(|e| e.constants),
        estimation,
        estimation_time,
        wall_clock_to_target: reached.map(|r| r.0),
        rounds_to_target: reached.map(|r| r.1),
        diverged,
        records,
    })
}

/// Runs `config.strategy` end to end.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    let scenario = Scenario::build(config)?;
    run_strategy(&scenario, &config.strategy, None)
}

/// Runs one strategy on a prebuilt scenario. Optimized strategies reuse
/// `phase` when given (its time is still charged) or estimate afresh.
pub fn run_strategy(scenario: &Scenario, strategy: &Strategy, phase: Option<&EstimationPhase>) -> Result<RunReport> {
    strategy.validate()?;
    let phase = if strategy.needs_constants() {
        Some(match phase {
            Some(p) => p.clone(),
            None => estimate_phase(scenario)?,
        })
    } else {
        None
    };
    let plan = choose_plan(scenario, strategy, phase.as_ref().map(|p| &p.estimation.constants))?;
    execute_plan(scenario, strategy, plan, phase)
}

/// The strategies compared by [`sweep`]: the optimized plan, four sampling
/// baselines at full rank, and two more rank baselines at `q = 0.2`
/// (`fixed:0.2+full-rank` belongs to both groups).
pub fn default_sweep_strategies() -> Vec<Strategy> {
    use RankStrategy as K;
    use SamplingStrategy as S;
    vec![
        Strategy::OPTIMIZED,
        Strategy::new(S::Full, K::Full),
        Strategy::new(S::Fixed(0.2), K::Full),
        Strategy::new(S::Uniform, K::Full),
        Strategy::new(S::Weighted, K::Full),
        Strategy::new(S::Fixed(0.2), K::Normal { mean: None, std: None }),
        Strategy::new(S::Fixed(0.2), K::Uniform),
    ]
}

/// One line of a strategy comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    pub wall_clock_to_target: Option<f64>,
    pub rounds_to_target: Option<usize>,
    pub estimation_time: f64,
    pub rounds_run: usize,
    pub final_loss: Option<f64>,
    pub diverged: bool,
}

impl From<&RunReport> for SweepRow {
    fn from(r: &RunReport) -> Self {
        Self {
            strategy: r.strategy.clone(),
            wall_clock_to_target: r.wall_clock_to_target,
            rounds_to_target: r.rounds_to_target,
            estimation_time: r.estimation_time,
            rounds_run: r.records.len(),
            final_loss: r.final_loss(),
            diverged: r.diverged,
        }
    }
}

/// Runs every strategy on the same scenario (one shared estimation phase,
/// charged to each optimized strategy).
pub fn sweep(config: &ExperimentConfig, strategies: &[Strategy]) -> Result<Vec<RunReport>> {
    let scenario = Scenario::build(config)?;
    let phase = if strategies.iter().any(Strategy::needs_constants) {
        Some(estimate_phase(&scenario)?)
    } else {
        None
    };
    strategies
        .par_iter()
        .map(|s| run_strategy(&scenario, s, phase.as_ref()))
        .collect()
}
