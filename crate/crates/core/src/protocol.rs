//! Federated LoRA with independent client sampling.
//!
//! Every round the server draws one sketch per client, each client joins
//! independently with probability `q_n`, participants run `H` local SGD steps
//! on their sketched factors, and the server applies the participants'
//! deltas scaled by `a_n / q_n`. That scaling keeps the expected global update
//! equal to the full-participation update.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{self, Batch, LoraState, SketchMatrix};
use crate::wireless::{self, ClientProfile, RoundRecord, SystemConfig};

/// Per-client sampling probabilities and sketching ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanRepr", into = "PlanRepr")]
pub struct Plan {
    q: Vec<f64>,
    k: Vec<usize>,
    rank: usize,
}

#[derive(Serialize, Deserialize)]
struct PlanRepr {
    rank: usize,
    q: Vec<f64>,
    k: Vec<usize>,
}

impl TryFrom<PlanRepr> for Plan {
    type Error = Error;

    fn try_from(r: PlanRepr) -> Result<Self> {
        Plan::new(r.q, r.k, r.rank)
    }
}

impl From<Plan> for PlanRepr {
    fn from(p: Plan) -> Self {
        PlanRepr {
            rank: p.rank,
            q: p.q,
            k: p.k,
        }
    }
}

impl Plan {
    pub fn new(q: Vec<f64>, k: Vec<usize>, rank: usize) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidPlan("plan has no clients".into()));
        }
        if q.len() != k.len() {
            return Err(Error::InvalidPlan(format!(
                "{} probabilities but {} sketching ratios",
                q.len(),
                k.len()
            )));
        }
        if rank == 0 {
            return Err(Error::InvalidPlan("rank must be positive".into()));
        }
        if let Some((n, p)) = q.iter().enumerate().find(|(_, p)| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::InvalidPlan(format!(
                "client {n}: sampling probability {p} not in (0, 1]"
            )));
        }
        if let Some((n, kn)) = k.iter().enumerate().find(|(_, kn)| **kn == 0 || **kn > rank) {
            return Err(Error::InvalidPlan(format!(
                "client {n}: sketching ratio {kn} not in [1, {rank}]"
            )));
        }
        Ok(Self { q, k, rank })
    }

    /// Every client with the same probability and ratio.
    pub fn homogeneous(clients: usize, q: f64, k: usize, rank: usize) -> Result<Self> {
        Self::new(vec![q; clients], vec![k; clients], rank)
    }

    /// Full participation at full rank.
    pub fn full(clients: usize, rank: usize) -> Self {
        Self::homogeneous(clients, 1.0, rank, rank).expect("full plan is valid")
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn k(&self) -> &[usize] {
        &self.k
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn with_q(&self, q: Vec<f64>) -> Result<Self> {
        Self::new(q, self.k.clone(), self.rank)
    }

    pub fn with_k(&self, k: Vec<usize>) -> Result<Self> {
        Self::new(self.q.clone(), k, self.rank)
    }
}

/// Which clients joined a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipationDraw {
    pub round: usize,
    pub indicators: Vec<bool>,
}

impl ParticipationDraw {
    pub fn participants(&self) -> Vec<usize> {
        self.indicators
            .iter()
            .enumerate()
            .filter_map(|(n, &on)| on.then_some(n))
            .collect()
    }
}

/// One independent Bernoulli(q_n) trial per client, in client order.
pub fn draw_participants<R: Rng + ?Sized>(plan: &Plan, round: usize, rng: &mut R) -> ParticipationDraw {
    let indicators = plan.q().iter().map(|&q| rng.random::<f64>() < q).collect();
    ParticipationDraw { round, indicators }
}

/// Start-minus-end factors of one participant after its local steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDelta {
    pub client: usize,
    pub delta_b: DMatrix<f64>,
    pub delta_a: DMatrix<f64>,
}

/// Scalars a client uploads for `k` active components: `k` columns of `B` and `k` rows of `A`.
pub fn transmitted_parameters(k: usize, outputs: usize, inputs: usize) -> usize {
    k * (outputs + inputs)
}

/// A client's local training samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    inputs: DMatrix<f64>,
    labels: Vec<usize>,
}

impl ClientDataset {
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Draws `size` rows uniformly with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Batch {
        let rows: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        let inputs = self.inputs.select_rows(rows.iter());
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Batch::new(inputs, labels).expect("rows and labels agree")
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Batch {
        Batch::new(self.inputs.clone(), self.labels.clone()).expect("rows and labels agree")
    }
}

/// Local SGD settings shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// Runs the local sketched-SGD steps from the broadcast global factors.
///
/// The returned delta already contains the learning rate.
pub fn local_update<R: Rng + ?Sized>(
    global: &LoraState,
    sketch: &SketchMatrix,
    data: &ClientDataset,
    client: usize,
    training: &LocalTraining,
    rng: &mut R,
) -> Result<ClientDelta> {
    if data.is_empty() {
        return Err(Error::EmptyDataset { client });
    }
    if training.steps == 0 || training.batch_size == 0 {
        return Err(Error::Config("local steps and batch size must be positive".into()));
    }
    let mut local = global.clone();
    for _ in 0..training.steps {
        let batch = data.sample_batch(training.batch_size, rng);
        let grads = lora::lora_grads(&local, sketch, &batch)?;
        let b = local.b() - grads.b * training.learning_rate;
        let a = local.a() - grads.a * training.learning_rate;
        local = local.with_factors(b, a)?;
    }
    Ok(ClientDelta {
        client,
        delta_b: global.b() - local.b(),
        delta_a: global.a() - local.a(),
    })
}

/// Applies `X ← X − Σ_{participants} (a_n / q_n) ΔX_n`.
///
/// `deltas` must hold exactly one entry per participant; summation follows
/// ascending client index regardless of the order supplied.
pub fn aggregate(
    global: &LoraState,
    deltas: &[ClientDelta],
    draw: &ParticipationDraw,
    plan: &Plan,
    weights: &[f64],
) -> Result<LoraState> {
    let n = plan.len();
    if draw.indicators.len() != n || weights.len() != n {
        return Err(Error::Dimension(format!(
            "plan has {n} clients, draw {}, weights {}",
            draw.indicators.len(),
            weights.len()
        )));
    }
    let weight_sum: f64 = weights.iter().sum();
    if (weight_sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("aggregation weights sum to {weight_sum}")));
    }
    let mut by_client: Vec<Option<&ClientDelta>> = vec![None; n];
    for delta in deltas {
        if delta.client >= n || !draw.indicators[delta.client] {
            return Err(Error::ProtocolViolation(format!(
                "delta from non-participant client {}",
                delta.client
            )));
        }
        if by_client[delta.client].replace(delta).is_some() {
            return Err(Error::ProtocolViolation(format!(
                "duplicate delta from client {}",
                delta.client
            )));
        }
    }
    let mut b = global.b().clone();
    let mut a = global.a().clone();
    for (client, slot) in by_client.iter().enumerate() {
        match (draw.indicators[client], slot) {
            (true, Some(delta)) => {
                let w = weights[client] / plan.q()[client];
                if delta.delta_b.shape() != b.shape() || delta.delta_a.shape() != a.shape() {
                    return Err(Error::Dimension(format!("delta from client {client} has wrong shape")));
                }
                b -= &delta.delta_b * w;
                a -= &delta.delta_a * w;
            }
            (true, None) => {
                return Err(Error::ProtocolViolation(format!(
                    "missing delta from participant {client}"
                )))
            }
            _ => {}
        }
    }
    global.with_factors(b, a)
}

/// Deterministic random streams derived from one master seed.
///
/// Each purpose gets its own ChaCha key and each (round, client) pair its
/// own stream, so a client's randomness does not depend on which other
/// clients participated or on execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

const SKETCH_TAG: u64 = 0x5348_4554_4348_0001;
const PARTICIPATION_TAG: u64 = 0x5041_5254_4943_0002;
const BATCH_TAG: u64 = 0x4241_5443_4845_0003;

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    fn stream(&self, tag: u64, round: usize, client: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master ^ tag);
        rng.set_stream(((round as u64) << 32) | client as u64);
        rng
    }

    pub fn sketch(&self, round: usize, client: usize) -> ChaCha8Rng {
        self.stream(SKETCH_TAG, round, client)
    }

    pub fn participation(&self, round: usize) -> ChaCha8Rng {
        self.stream(PARTICIPATION_TAG, round, 0)
    }

    pub fn batches(&self, round: usize, client: usize) -> ChaCha8Rng {
        self.stream(BATCH_TAG, round, client)
    }
}

/// A simulated federation: global model, client data, timing profiles, and round log.
#[derive(Debug, Clone)]
pub struct Federation {
    state: LoraState,
    clients: Vec<ClientDataset>,
    profiles: Vec<ClientProfile>,
    system: SystemConfig,
    batch_size: usize,
    eval: Batch,
    seeds: SeedStreams,
    round: usize,
    elapsed: f64,
    records: Vec<RoundRecord>,
}

impl Federation {
    pub fn new(
        state: LoraState,
        clients: Vec<ClientDataset>,
        profiles: Vec<ClientProfile>,
        system: SystemConfig,
        batch_size: usize,
        eval: Batch,
        seed: u64,
    ) -> Result<Self> {
        system.validate()?;
        wireless::validate_fleet(&profiles)?;
        if clients.len() != profiles.len() {
            return Err(Error::Dimension(format!(
                "{} client datasets but {} profiles",
                clients.len(),
                profiles.len()
            )));
        }
        if state.rank() != system.rank {
            return Err(Error::Dimension(format!(
                "model rank {} differs from system rank {}",
                state.rank(),
                system.rank
            )));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            state,
            clients,
            profiles,
            system,
            batch_size,
            eval,
            seeds: SeedStreams::new(seed),
            round: 0,
            elapsed: 0.0,
            records: Vec::new(),
        })
    }

    /// Starts the wall clock at `offset` seconds (e.g. time already spent on probes).
    pub fn with_elapsed(mut self, offset: f64) -> Self {
        self.elapsed = offset;
        self
    }

    pub fn state(&self) -> &LoraState {
        &self.state
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<RoundRecord> {
        self.records
    }

    pub fn elapsed(&self) -> f64 {
        self.elapsed
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn weights(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p.weight).collect()
    }

    pub fn training(&self) -> LocalTraining {
        LocalTraining {
            steps: self.system.local_steps,
            learning_rate: self.system.learning_rate,
            batch_size: self.batch_size,
        }
    }

    /// Loss and accuracy of the current global model on the evaluation split.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let weight = self.state.effective_weight(&SketchMatrix::full(self.state.rank()))?;
        Ok((
            lora::dense_loss(&weight, &self.eval)?,
            lora::dense_accuracy(&weight, &self.eval)?,
        ))
    }

    /// Server-side sketches for every client in the current round.
    pub fn round_sketches(&self, plan: &Plan) -> Result<Vec<SketchMatrix>> {
        plan.k()
            .iter()
            .enumerate()
            .map(|(n, &k)| SketchMatrix::sample(plan.rank(), k, &mut self.seeds.sketch(self.round, n)))
            .collect()
    }

    /// Executes one round under `plan` and appends its record.
    pub fn run_round(&mut self, plan: &Plan) -> Result<&RoundRecord> {
        if plan.len() != self.clients.len() || plan.rank() != self.system.rank {
            return Err(Error::Dimension(format!(
                "plan ({} clients, rank {}) does not match federation ({} clients, rank {})",
                plan.len(),
                plan.rank(),
                self.clients.len(),
                self.system.rank
            )));
        }
        let sketches = self.round_sketches(plan)?;
        let draw = draw_participants(plan, self.round, &mut self.seeds.participation(self.round));
        let participants = draw.participants();
        let training = self.training();

        let deltas = participants
            .par_iter()
            .map(|&n| {
                let mut rng = self.seeds.batches(self.round, n);
                local_update(&self.state, &sketches[n], &self.clients[n], n, &training, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        self.state = aggregate(&self.state, &deltas, &draw, plan, &self.weights())?;

        let (taus, ts) = wireless::scaled_fleet_times(plan, &self.profiles)?;
        let round_time =
            wireless::round_time_or_zero(&participants, &taus, &ts, self.system.total_bandwidth)?;
        self.elapsed += round_time;
        let (global_loss, accuracy) = self.evaluate()?;
        self.records.push(RoundRecord {
            round: self.round,
            participants,
            round_time,
            cumulative_time: self.elapsed,
            global_loss,
            accuracy,
        });
        self.round += 1;
        Ok(self.records.last().expect("just pushed"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn toy_data(rows: usize, features: usize, classes: usize, seed: u64) -> ClientDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let inputs = DMatrix::from_fn(rows, features, |_, _| n.sample(&mut rng));
        let labels = (0..rows).map(|i| i % classes).collect();
        ClientDataset::new(inputs, labels).unwrap()
    }

    fn toy_state(seed: u64) -> LoraState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = LoraState::init(3, 4, 4, &mut rng);
        // non-zero B so both factors move
        let b = DMatrix::from_fn(3, 4, |i, j| 0.05 * (i as f64 - j as f64));
        s.with_factors(b, s.a().clone()).unwrap()
    }

    #[test]
    fn plan_rejects_zero_probability_and_bad_ratio() {
        assert!(Plan::new(vec![0.0, 0.5], vec![1, 1], 2).is_err());
        assert!(Plan::new(vec![1.2], vec![1], 2).is_err());
        assert!(Plan::new(vec![0.5], vec![0], 2).is_err());
        assert!(Plan::new(vec![0.5], vec![3], 2).is_err());
        assert!(Plan::new(vec![0.5], vec![2], 2).is_ok());
    }

    #[test]
    fn plan_json_validates() {
        let ok: Plan = serde_json::from_str(r#"{"rank":4,"q":[0.5],"k":[2]}"#).unwrap();
        assert_eq!(ok.k(), &[2]);
        assert!(serde_json::from_str::<Plan>(r#"{"rank":4,"q":[0.0],"k":[2]}"#).is_err());
    }

    #[test]
    fn full_probability_always_participates() {
        let plan = Plan::full(7, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for r in 0..100 {
            assert!(draw_participants(&plan, r, &mut rng).indicators.iter().all(|&b| b));
        }
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let state = toy_state(1);
        let data = toy_data(10, 4, 3, 2);
        let training = LocalTraining {
            steps: 3,
            learning_rate: 0.0,
            batch_size: 4,
        };
        let s = SketchMatrix::full(4);
        let d = local_update(&state, &s, &data, 0, &training, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(d.delta_b, DMatrix::zeros(3, 4));
        assert_eq!(d.delta_a, DMatrix::zeros(4, 4));
    }

    #[test]
    fn single_step_delta_is_scaled_gradient() {
        let state = toy_state(4);
        let data = toy_data(10, 4, 3, 5);
        let training = LocalTraining {
            steps: 1,
            learning_rate: 0.3,
            batch_size: 5,
        };
        let s = SketchMatrix::new(4, vec![1, 3]).unwrap();
        let d = local_update(&state, &s, &data, 0, &training, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let batch = data.sample_batch(5, &mut ChaCha8Rng::seed_from_u64(6));
        let g = lora::lora_grads(&state, &s, &batch).unwrap();
        assert!((&d.delta_b - &g.b * 0.3).amax() < 1e-15);
        assert!((&d.delta_a - &g.a * 0.3).amax() < 1e-15);
        // components outside the sketch are untouched
        for j in [0, 2] {
            assert!(d.delta_b.column(j).iter().all(|&v| v == 0.0));
            assert!(d.delta_a.row(j).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn empty_client_rejected() {
        let state = toy_state(1);
        let data = ClientDataset::new(DMatrix::zeros(0, 4), vec![]).unwrap();
        let training = LocalTraining {
            steps: 1,
            learning_rate: 0.1,
            batch_size: 2,
        };
        let err = local_update(&state, &SketchMatrix::full(4), &data, 3, &training, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::EmptyDataset { client: 3 })));
    }

    fn delta(client: usize, value: f64) -> ClientDelta {
        ClientDelta {
            client,
            delta_b: DMatrix::from_element(3, 4, value),
            delta_a: DMatrix::from_element(4, 4, value),
        }
    }

    #[test]
    fn single_client_half_probability_doubles_update() {
        let state = toy_state(2);
        let plan = Plan::new(vec![0.5], vec![4], 4).unwrap();
        let draw = ParticipationDraw {
            round: 0,
            indicators: vec![true],
        };
        let next = aggregate(&state, &[delta(0, 0.1)], &draw, &plan, &[1.0]).unwrap();
        assert!((state.b() - next.b()).iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn no_participants_leaves_state_unchanged() {
        let state = toy_state(2);
        let plan = Plan::homogeneous(2, 0.5, 4, 4).unwrap();
        let draw = ParticipationDraw {
            round: 0,
            indicators: vec![false, false],
        };
        let next = aggregate(&state, &[], &draw, &plan, &[0.5, 0.5]).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn protocol_violations_detected() {
        let state = toy_state(2);
        let plan = Plan::homogeneous(2, 0.5, 4, 4).unwrap();
        let draw = ParticipationDraw {
            round: 0,
            indicators: vec![true, false],
        };
        let w = [0.5, 0.5];
        assert!(matches!(
            aggregate(&state, &[delta(0, 0.1), delta(1, 0.1)], &draw, &plan, &w),
            Err(Error::ProtocolViolation(_))
        ));
        assert!(matches!(
            aggregate(&state, &[], &draw, &plan, &w),
            Err(Error::ProtocolViolation(_))
        ));
        assert!(matches!(
            aggregate(&state, &[delta(0, 0.1), delta(0, 0.1)], &draw, &plan, &w),
            Err(Error::ProtocolViolation(_))
        ));
    }

    #[test]
    fn aggregation_order_does_not_matter() {
        let state = toy_state(2);
        let plan = Plan::new(vec![0.3, 0.7, 1.0], vec![4; 3], 4).unwrap();
        let draw = ParticipationDraw {
            round: 0,
            indicators: vec![true, true, true],
        };
        let w = [0.2, 0.3, 0.5];
        let ds = [delta(0, 0.1), delta(1, -0.3), delta(2, 0.7)];
        let forward = aggregate(&state, &ds, &draw, &plan, &w).unwrap();
        let reversed: Vec<_> = ds.iter().rev().cloned().collect();
        assert_eq!(forward, aggregate(&state, &reversed, &draw, &plan, &w).unwrap());
    }

    #[test]
    fn transmitted_parameter_count() {
        assert_eq!(transmitted_parameters(3, 10, 32), 126);
    }
}
