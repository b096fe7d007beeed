//! Simulator and plan optimizer for federated LoRA fine-tuning with
//! independent client sampling and per-client sketching over a shared
//! wireless uplink.
//!
//! - [`lora`]: toy LoRA classifier, sketch sampling, sketched gradients.
//! - [`protocol`]: Bernoulli participation, local sketched SGD, unbiased aggregation.
//! - [`wireless`]: water-filling round time and expected round-time bounds.
//! - [`planner`]: constant estimation, convex q-step, greedy k-step, alternation.
//! - [`harness`]: synthetic non-IID data, baselines, experiments, reports.

pub mod error;
pub mod harness;
pub mod lora;
pub mod planner;
pub mod protocol;
pub mod wireless;

pub use error::{Error, Result};
pub use lora::{Batch, LoraState, SketchMatrix};
pub use planner::{ConvergenceConstants, Planner, ProbeObservation};
pub use protocol::{Federation, Plan};
pub use wireless::{ClientProfile, RoundRecord, SystemConfig};
