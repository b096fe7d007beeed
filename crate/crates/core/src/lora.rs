//! Toy LoRA model with the sketching mechanism.
//!
//! The model is a single linear classifier whose effective weight is
//! `W0 + B·S·A`: `W0` (classes × features) is frozen, `B` (classes × rank) and
//! `A` (rank × features) are the trainable low-rank factors, and `S` is a
//! random scaled diagonal selector that keeps `k` of the `rank` components.
//! Sketches are stored as an index set plus a scale and are never
//! materialized as dense matrices.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Scale applied to the standard-normal entries of the frozen base weight.
pub const BASE_WEIGHT_SCALE: f64 = 0.1;
/// Standard deviation of the initial `A` factor (`B` starts at zero).
pub const LORA_A_INIT_STD: f64 = 0.02;

/// Frozen base weight plus trainable LoRA factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraState {
    w0: Arc<DMatrix<f64>>,
    b: DMatrix<f64>,
    a: DMatrix<f64>,
}

impl LoraState {
    pub fn new(w0: DMatrix<f64>, b: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        Self::with_shared_base(Arc::new(w0), b, a)
    }

    fn with_shared_base(w0: Arc<DMatrix<f64>>, b: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        if b.ncols() == 0 {
            return Err(Error::Dimension("LoRA rank must be positive".into()));
        }
        if b.ncols() != a.nrows() {
            return Err(Error::Dimension(format!(
                "B has {} columns but A has {} rows",
                b.ncols(),
                a.nrows()
            )));
        }
        if b.nrows() != w0.nrows() || a.ncols() != w0.ncols() {
            return Err(Error::Dimension(format!(
                "B·A is {}x{} but W0 is {}x{}",
                b.nrows(),
                a.ncols(),
                w0.nrows(),
                w0.ncols()
            )));
        }
        Ok(Self { w0, b, a })
    }

    /// Standard initialization: `W0` from a scaled standard normal, `B = 0`,
    /// `A` normal with std [`LORA_A_INIT_STD`], so the initial update `B·A` is zero.
    pub fn init<R: Rng + ?Sized>(outputs: usize, inputs: usize, rank: usize, rng: &mut R) -> Self {
        assert!(outputs > 0 && inputs > 0 && rank > 0, "dimensions must be positive");
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        let w0 = DMatrix::from_fn(outputs, inputs, |_, _| {
            BASE_WEIGHT_SCALE * std_normal.sample(rng)
        });
        let a_dist = Normal::new(0.0, LORA_A_INIT_STD).unwrap();
        let a = DMatrix::from_fn(rank, inputs, |_, _| a_dist.sample(rng));
        let b = DMatrix::zeros(outputs, rank);
        Self {
            w0: Arc::new(w0),
            b,
            a,
        }
    }

    /// Replaces the trainable factors, keeping the (shared) frozen base.
    pub fn with_factors(&self, b: DMatrix<f64>, a: DMatrix<f64>) -> Result<Self> {
        Self::with_shared_base(Arc::clone(&self.w0), b, a)
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.w0
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w0.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.w0.ncols()
    }

    /// `W0 + B·S·A`.
    pub fn effective_weight(&self, sketch: &SketchMatrix) -> Result<DMatrix<f64>> {
        Ok(&*self.w0 + apply_sketch(&self.b, sketch, &self.a)?)
    }
}

/// A sketching matrix `S = (rank / k) · Σ_{j∈Γ} e_j e_jᵀ`, stored as `Γ` plus the rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SketchMatrix {
    gamma: usize,
    indices: Vec<usize>,
}

impl SketchMatrix {
    /// Builds a sketch from explicit (zero-based) component indices.
    pub fn new(gamma: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() || indices.len() > gamma {
            return Err(Error::InvalidSketchRatio {
                k: indices.len(),
                gamma,
            });
        }
        if let Some(&j) = indices.iter().find(|&&j| j >= gamma) {
            return Err(Error::Dimension(format!(
                "sketch index {j} out of range for rank {gamma}"
            )));
        }
        Ok(Self { gamma, indices })
    }

    /// The identity sketch (`k = rank`).
    pub fn full(gamma: usize) -> Self {
        assert!(gamma > 0, "rank must be positive");
        Self {
            gamma,
            indices: (0..gamma).collect(),
        }
    }

    /// Draws `Γ` uniformly from all `k`-subsets of the `gamma` components.
    pub fn sample<R: Rng + ?Sized>(gamma: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k == 0 || k > gamma {
            return Err(Error::InvalidSketchRatio { k, gamma });
        }
        let mut indices = rand::seq::index::sample(rng, gamma, k).into_vec();
        indices.sort_unstable();
        Ok(Self { gamma, indices })
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }

    /// Sorted zero-based indices of the active components.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scale(&self) -> f64 {
        self.gamma as f64 / self.indices.len() as f64
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }

    /// Diagonal of `S` (zeros outside `Γ`).
    pub fn diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.gamma);
        let s = self.scale();
        for &j in &self.indices {
            d[j] = s;
        }
        d
    }
}

/// `B·S·A = scale · Σ_{j∈Γ} B[:, j] · A[j, :]`.
pub fn apply_sketch(b: &DMatrix<f64>, sketch: &SketchMatrix, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.ncols() != sketch.gamma() || a.nrows() != sketch.gamma() {
        return Err(Error::Dimension(format!(
            "B is {}x{}, A is {}x{}, sketch rank is {}",
            b.nrows(),
            b.ncols(),
            a.nrows(),
            a.ncols(),
            sketch.gamma()
        )));
    }
    let scale = sketch.scale();
    let mut out = DMatrix::zeros(b.nrows(), a.ncols());
    for &j in sketch.indices() {
        out.ger(scale, &b.column(j), &a.row(j).transpose(), 1.0);
    }
    Ok(out)
}

/// A mini-batch of feature rows and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: DMatrix<f64>,
    labels: Vec<usize>,
}

impl Batch {
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

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_batch(weight: &DMatrix<f64>, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if batch.inputs.ncols() != weight.ncols() {
        return Err(Error::Dimension(format!(
            "batch has {} features, model expects {}",
            batch.inputs.ncols(),
            weight.ncols()
        )));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= weight.nrows()) {
        return Err(Error::Dimension(format!(
            "label {y} out of range for {} classes",
            weight.nrows()
        )));
    }
    Ok(())
}

/// Row-wise softmax probabilities and mean cross-entropy for a dense weight.
fn softmax_cross_entropy(weight: &DMatrix<f64>, batch: &Batch) -> (DMatrix<f64>, f64) {
    let mut probs = &batch.inputs * weight.transpose();
    let mut total = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        let mut row = probs.row_mut(i);
        let max = row.max();
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        total += sum.ln() - row[y].ln();
        row /= sum;
    }
    (probs, total / batch.len() as f64)
}

/// Mean softmax cross-entropy of a plain weight matrix (classes × features).
pub fn dense_loss(weight: &DMatrix<f64>, batch: &Batch) -> Result<f64> {
    check_batch(weight, batch)?;
    Ok(softmax_cross_entropy(weight, batch).1)
}

/// Fraction of rows whose arg-max class equals the label.
pub fn dense_accuracy(weight: &DMatrix<f64>, batch: &Batch) -> Result<f64> {
    check_batch(weight, batch)?;
    let logits = &batch.inputs * weight.transpose();
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| logits.row(i).transpose().argmax().0 == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Gradient of the mean loss with respect to the effective weight, plus the loss.
pub fn weight_gradient(weight: &DMatrix<f64>, batch: &Batch) -> Result<(DMatrix<f64>, f64)> {
    check_batch(weight, batch)?;
    let (mut residual, loss) = softmax_cross_entropy(weight, batch);
    for (i, &y) in batch.labels.iter().enumerate() {
        residual[(i, y)] -= 1.0;
    }
    let grad = residual.transpose() * &batch.inputs / batch.len() as f64;
    Ok((grad, loss))
}

/// Mean cross-entropy of the model with effective weight `W0 + B·S·A`.
pub fn forward_loss(state: &LoraState, sketch: &SketchMatrix, batch: &Batch) -> Result<f64> {
    let weight = state.effective_weight(sketch)?;
    dense_loss(&weight, batch)
}

/// Gradients of the sketched loss with respect to the LoRA factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub b: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub loss: f64,
}

/// `∇_B = G·Aᵀ·Sᵀ` and `∇_A = Sᵀ·Bᵀ·G`, where `G` is the gradient with
/// respect to the effective weight. Columns of `∇_B` and rows of `∇_A`
/// outside `Γ` are exactly zero.
pub fn lora_grads(state: &LoraState, sketch: &SketchMatrix, batch: &Batch) -> Result<LoraGrads> {
    let weight = state.effective_weight(sketch)?;
    let (g, loss) = weight_gradient(&weight, batch)?;
    let scale = sketch.scale();
    let mut grad_b = DMatrix::zeros(state.outputs(), state.rank());
    let mut grad_a = DMatrix::zeros(state.rank(), state.inputs());
    for &j in sketch.indices() {
        let col = &g * state.a.row(j).transpose() * scale;
        grad_b.set_column(j, &col);
        let row = state.b.column(j).transpose() * &g * scale;
        grad_a.set_row(j, &row);
    }
    Ok(LoraGrads {
        b: grad_b,
        a: grad_a,
        loss,
    })
}
