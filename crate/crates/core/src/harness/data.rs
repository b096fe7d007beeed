//! Synthetic classification data, non-IID partitioning, and simulated client profiles.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::Batch;
use crate::protocol::ClientDataset;
use crate::wireless::ClientProfile;

/// Feature rows with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        (
            self.inputs.select_rows(rows.iter()),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    /// Splits off the last `eval_samples` rows as a held-out batch.
    pub fn split_eval(self, eval_samples: usize) -> Result<(LabeledData, Batch)> {
        if eval_samples == 0 || eval_samples >= self.len() {
            return Err(Error::Config(format!(
                "cannot hold out {eval_samples} of {} samples",
                self.len()
            )));
        }
        let cut = self.len() - eval_samples;
        let train_rows: Vec<usize> = (0..cut).collect();
        let eval_rows: Vec<usize> = (cut..self.len()).collect();
        let (ei, el) = self.subset(&eval_rows);
        let (ti, tl) = self.subset(&train_rows);
        Ok((
            LabeledData {
                inputs: ti,
                labels: tl,
                classes: self.classes,
            },
            Batch::new(ei, el)?,
        ))
    }
}

/// Placement of the class means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanLayout {
    /// Independent normal entries.
    #[default]
    Iid,
    /// Evenly spaced on a circle in a random two-dimensional subspace, so the
    /// class structure has rank two and its difficulty does not depend on the draw.
    Circle,
}

/// Isotropic Gaussian clusters, one per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianMixture {
    pub classes: usize,
    pub features: usize,
    pub samples: usize,
    /// Spread of the class means: per-coordinate standard deviation for
    /// [`MeanLayout::Iid`], radius for [`MeanLayout::Circle`].
    pub separation: f64,
    #[serde(default)]
    pub layout: MeanLayout,
    /// Within-class standard deviation.
    pub noise: f64,
}

impl Default for GaussianMixture {
    fn default() -> Self {
        Self {
            classes: 10,
            features: 32,
            samples: 20_000,
            separation: 4.0,
            layout: MeanLayout::Circle,
            noise: 1.0,
        }
    }
}

impl GaussianMixture {
    /// One mean per class (row), arranged according to `layout`.
    pub fn class_means<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let std = Normal::new(0.0, 1.0).expect("unit std");
        match self.layout {
            MeanLayout::Iid => DMatrix::from_fn(self.classes, self.features, |_, _| self.separation * std.sample(rng)),
            MeanLayout::Circle => {
                let basis = DMatrix::from_fn(self.features, 2, |_, _| std.sample(rng)).qr().q();
                let c = self.classes as f64;
                DMatrix::from_fn(self.classes, self.features, |i, j| {
                    let theta = std::f64::consts::TAU * i as f64 / c;
                    self.separation * (theta.cos() * basis[(j, 0)] + theta.sin() * basis[(j, 1)])
                })
            }
        }
    }

    /// Samples with labels drawn uniformly and rows shuffled by construction.
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LabeledData> {
        if self.classes < 2 || self.features < 2 || self.samples == 0 {
            return Err(Error::Config("mixture needs >= 2 classes and features, and some samples".into()));
        }
        if !(self.separation > 0.0 && self.noise > 0.0) {
            return Err(Error::Config("mixture spreads must be positive".into()));
        }
        let means = self.class_means(rng);
        let noise = Normal::new(0.0, self.noise).expect("positive std");
        let labels: Vec<usize> = (0..self.samples).map(|_| rng.random_range(0..self.classes)).collect();
        let mut inputs = DMatrix::zeros(self.samples, self.features);
        for (i, &y) in labels.iter().enumerate() {
            for j in 0..self.features {
                inputs[(i, j)] = means[(y, j)] + noise.sample(rng);
            }
        }
        Ok(LabeledData {
            inputs,
            labels,
            classes: self.classes,
        })
    }
}

/// Client index lists and their aggregation weights `|D_n| / |D|`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub indices: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl Partition {
    pub fn datasets(&self, data: &LabeledData) -> Result<Vec<ClientDataset>> {
        self.indices
            .iter()
            .map(|rows| {
                let (inputs, labels) = data.subset(rows);
                ClientDataset::new(inputs, labels)
            })
            .collect()
    }
}

/// Maximum number of full re-draws when some client ends up with no samples.
pub const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Splits every class across clients with proportions drawn from
/// `Dirichlet(alpha, …, alpha)`. A draw leaving any client empty is
/// discarded and the whole partition re-drawn.
pub fn dirichlet_partition<R: Rng + ?Sized>(
    labels: &[usize],
    classes: usize,
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Partition> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("Dirichlet concentration {alpha} must be positive")));
    }
    if labels.len() < clients {
        return Err(Error::Config(format!(
            "{} samples cannot give each of {clients} clients at least one",
            labels.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Config(format!("label {y} out of range for {classes} classes")));
        }
        by_class[y].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).expect("positive shape");

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut indices: Vec<Vec<usize>> = vec![Vec::new(); clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut props: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = props.iter().sum();
            if !(total > 0.0) {
                // every component underflowed; fall back to a single random owner
                props.iter_mut().for_each(|p| *p = 0.0);
                props[rng.random_range(0..clients)] = 1.0;
            } else {
                props.iter_mut().for_each(|p| *p /= total);
            }
            let len = members.len() as f64;
            let mut start = 0usize;
            let mut cumulative = 0.0;
            for (n, p) in props.iter().enumerate() {
                cumulative += p;
                let end = if n + 1 == clients {
                    members.len()
                } else {
                    ((cumulative * len).round() as usize).min(members.len())
                };
                if end > start {
                    indices[n].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
        }
        if indices.iter().all(|rows| !rows.is_empty()) {
            for rows in &mut indices {
                rows.sort_unstable();
            }
            let total = labels.len() as f64;
            let weights = indices.iter().map(|rows| rows.len() as f64 / total).collect();
            return Ok(Partition { indices, weights });
        }
    }
    Err(Error::Config(format!(
        "no partition with every client non-empty after {MAX_PARTITION_ATTEMPTS} attempts"
    )))
}

/// Log-uniform ranges for the measured full-rank times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileRanges {
    pub tau_min: f64,
    pub tau_max: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for ProfileRanges {
    fn default() -> Self {
        Self {
            tau_min: 0.5,
            tau_max: 50.0,
            t_min: 5.0,
            t_max: 1000.0,
        }
    }
}

fn log_uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if lo == hi {
        return lo;
    }
    let u = Uniform::new_inclusive(lo.ln(), hi.ln()).expect("ordered range");
    u.sample(rng).exp()
}

/// One profile per client, times drawn log-uniformly from `ranges`.
pub fn simulate_profiles<R: Rng + ?Sized>(
    weights: &[f64],
    ranges: &ProfileRanges,
    rng: &mut R,
) -> Result<Vec<ClientProfile>> {
    let ok = |lo: f64, hi: f64| lo > 0.0 && hi >= lo && hi.is_finite();
    if !ok(ranges.tau_min, ranges.tau_max) || !ok(ranges.t_min, ranges.t_max) {
        return Err(Error::Config(format!("invalid profile ranges {ranges:?}")));
    }
    weights
        .iter()
        .map(|&w| {
            let tau = log_uniform(ranges.tau_min, ranges.tau_max, rng);
            let t = log_uniform(ranges.t_min, ranges.t_max, rng);
            ClientProfile::new(w, tau, t)
        })
        .collect()
}
