//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid sketching ratio k = {k} for rank {gamma} (need 1 <= k <= rank)")]
    InvalidSketchRatio { k: usize, gamma: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("client {client} has no training data")]
    EmptyDataset { client: usize },

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("probe observations are degenerate (estimation matrix has rank < 3)")]
    DegenerateProbes,

    #[error("probe observations are inconsistent with the convergence model: {0}")]
    InconsistentObservations(String),

    #[error("plan infeasible for client {client}: sampling lower bound {lower:.6} >= 1")]
    Infeasible { client: usize, lower: f64 },

    #[error("no feasible sampling plan: {0}")]
    NoFeasiblePlan(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
