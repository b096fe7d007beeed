//! Experiment configuration (TOML) and strategy names.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::{GaussianMixture, ProfileRanges};

/// How sampling probabilities are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    Optimized,
    /// `q_n = 1`.
    Full,
    /// `q_n = p` for every client.
    Fixed(f64),
    /// `q_n = 1/N`.
    Uniform,
    /// `q_n = a_n`.
    Weighted,
}

/// How sketching ratios are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankStrategy {
    Optimized,
    /// `k_n = rank`.
    Full,
    /// Truncated normal on `[0, rank]`, rounded and clamped to `[1, rank]`.
    /// Defaults: mean `rank/2`, std `rank/4`.
    Normal {
        #[serde(default)]
        mean: Option<f64>,
        #[serde(default)]
        std: Option<f64>,
    },
    /// `U(0, rank)`, rounded and clamped to `[1, rank]`.
    Uniform,
}

/// A sampling strategy paired with a rank strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Strategy {
    pub sampling: SamplingStrategy,
    pub rank: RankStrategy,
}

impl Strategy {
    pub const OPTIMIZED: Strategy = Strategy {
        sampling: SamplingStrategy::Optimized,
        rank: RankStrategy::Optimized,
    };

    pub fn new(sampling: SamplingStrategy, rank: RankStrategy) -> Self {
        Self { sampling, rank }
    }

    pub fn needs_constants(&self) -> bool {
        self.sampling == SamplingStrategy::Optimized || self.rank == RankStrategy::Optimized
    }

    pub fn validate(&self) -> Result<()> {
        if let SamplingStrategy::Fixed(p) = self.sampling {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("fixed sampling probability {p} not in (0, 1]")));
            }
        }
        if let RankStrategy::Normal { std: Some(s), .. } = self.rank {
            if !(s > 0.0) {
                return Err(Error::Config(format!("normal-rank std {s} must be positive")));
            }
        }
        Ok(())
    }
}

impl Default for Strategy {
    fn default() -> Self {
        Self::OPTIMIZED
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingStrategy::Optimized => write!(f, "optimized"),
            SamplingStrategy::Full => write!(f, "full"),
            SamplingStrategy::Fixed(p) => write!(f, "fixed:{p}"),
            SamplingStrategy::Uniform => write!(f, "uniform"),
            SamplingStrategy::Weighted => write!(f, "weighted"),
        }
    }
}

impl fmt::Display for RankStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankStrategy::Optimized => write!(f, "optimized-rank"),
            RankStrategy::Full => write!(f, "full-rank"),
            RankStrategy::Normal { mean: None, std: None } => write!(f, "normal-rank"),
            RankStrategy::Normal { mean, std } => write!(
                f,
                "normal-rank:{}:{}",
                mean.map_or("auto".to_string(), |m| m.to_string()),
                std.map_or("auto".to_string(), |s| s.to_string())
            ),
            RankStrategy::Uniform => write!(f, "uniform-rank"),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}", self.sampling, self.rank)
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimized" => Ok(Self::Optimized),
            "full" => Ok(Self::Full),
            "uniform" => Ok(Self::Uniform),
            "weighted" => Ok(Self::Weighted),
            "fixed" => Ok(Self::Fixed(0.2)),
            _ => match s.strip_prefix("fixed:") {
                Some(p) => p
                    .parse()
                    .map(Self::Fixed)
                    .map_err(|_| Error::Config(format!("bad fixed probability in {s:?}"))),
                None => Err(Error::Config(format!(
                    "unknown sampling strategy {s:?} (optimized, full, fixed[:p], uniform, weighted)"
                ))),
            },
        }
    }
}

impl FromStr for RankStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_opt = |v: &str| -> Result<Option<f64>> {
            if v == "auto" {
                Ok(None)
            } else {
                v.parse()
                    .map(Some)
                    .map_err(|_| Error::Config(format!("bad number {v:?} in {s:?}")))
            }
        };
        match s {
            "optimized" | "optimized-rank" => Ok(Self::Optimized),
            "full" | "full-rank" => Ok(Self::Full),
            "uniform-rank" => Ok(Self::Uniform),
            "normal" | "normal-rank" => Ok(Self::Normal { mean: None, std: None }),
            _ => {
                let rest = s
                    .strip_prefix("normal-rank:")
                    .ok_or_else(|| Error::Config(format!(
                        "unknown rank strategy {s:?} (optimized-rank, full-rank, normal-rank[:mean:std], uniform-rank)"
                    )))?;
                let (mean, std) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("expected normal-rank:<mean>:<std>, got {s:?}")))?;
                Ok(Self::Normal {
                    mean: parse_opt(mean)?,
                    std: parse_opt(std)?,
                })
            }
        }
    }
}

/// Parses `<sampling>[+<rank>]`; the rank part defaults to `optimized-rank`
/// for `optimized` sampling and `full-rank` otherwise.
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (sampling, rank) = match s.split_once('+') {
            Some((a, b)) => (a.parse::<SamplingStrategy>()?, Some(b.parse::<RankStrategy>()?)),
            None => (s.parse::<SamplingStrategy>()?, None),
        };
        let rank = rank.unwrap_or(if sampling == SamplingStrategy::Optimized {
            RankStrategy::Optimized
        } else {
            RankStrategy::Full
        });
        let strategy = Strategy { sampling, rank };
        strategy.validate()?;
        Ok(strategy)
    }
}

/// Stopping criterion on the held-out split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// Stop once the evaluation loss is at or below this value.
    Loss(f64),
    /// Stop once the evaluation accuracy is at or above this value.
    Accuracy(f64),
}

impl Target {
    pub fn reached(&self, loss: f64, accuracy: f64) -> bool {
        match *self {
            Target::Loss(v) => loss <= v,
            Target::Accuracy(v) => accuracy >= v,
        }
    }
}

/// Homogeneous probe plan for constant estimation. `k` is a fraction of
/// the rank, rounded up (`1.0` = full rank).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub q: f64,
    pub rank_fraction: f64,
}

impl ProbeSpec {
    pub fn k(&self, rank: usize) -> usize {
        ((self.rank_fraction * rank as f64).ceil() as usize).clamp(1, rank)
    }
}

/// Estimation and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// The four probe plans.
    pub probes: [ProbeSpec; 4],
    /// Probe target loss. `None` (written `"warmup"` in TOML) uses the loss
    /// after `warmup_rounds` full-participation rounds instead.
    #[serde(with = "estimation_loss")]
    pub estimation_loss: Option<f64>,
    /// Full-participation rounds whose final loss becomes the probe target.
    pub warmup_rounds: usize,
    /// Round cap for each probe run.
    pub probe_round_cap: usize,
    /// Independent runs per probe; their round counts are averaged.
    pub probe_repeats: usize,
    /// Number of steps in the control-value grid.
    pub grid_steps: usize,
    /// Maximum outer alternation iterations.
    pub max_iters: usize,
}

mod estimation_loss {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(rename_all = "lowercase")]
    enum Keyword {
        Warmup,
    }

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Loss(f64),
        Keyword(Keyword),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(loss) => Repr::Loss(*loss),
            None => Repr::Keyword(Keyword::Warmup),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(match Repr::deserialize(d)? {
            Repr::Loss(loss) => Some(loss),
            Repr::Keyword(Keyword::Warmup) => None,
        })
    }
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            probes: [
                ProbeSpec { q: 0.1, rank_fraction: 1.0 },
                ProbeSpec { q: 0.4, rank_fraction: 1.0 },
                ProbeSpec { q: 0.2, rank_fraction: 0.5 },
                ProbeSpec { q: 0.4, rank_fraction: 0.25 },
            ],
            estimation_loss: Some(1.1),
            warmup_rounds: 5,
            probe_round_cap: 500,
            probe_repeats: 1,
            grid_steps: crate::planner::DEFAULT_GRID_STEPS,
            max_iters: 20,
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub rank: usize,
    pub local_steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dirichlet_alpha: f64,
    pub total_bandwidth: f64,
    pub round_cap: usize,
    pub eval_samples: usize,
    pub target: Target,
    pub strategy: Strategy,
    pub data: GaussianMixture,
    pub profiles: ProfileRanges,
    pub planner: PlannerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            clients: 50,
            rank: 8,
            local_steps: 10,
            learning_rate: 0.05,
            batch_size: 16,
            dirichlet_alpha: 0.1,
            total_bandwidth: 100.0,
            round_cap: 2000,
            eval_samples: 2000,
            target: Target::Loss(0.65),
            strategy: Strategy::OPTIMIZED,
            data: GaussianMixture::default(),
            profiles: ProfileRanges::default(),
            planner: PlannerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: Self = toml::from_str(s)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("dirichlet_alpha", self.dirichlet_alpha),
            ("total_bandwidth", self.total_bandwidth),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let counts = [
            ("clients", self.clients),
            ("rank", self.rank),
            ("local_steps", self.local_steps),
            ("batch_size", self.batch_size),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.eval_samples >= self.data.samples {
            return Err(Error::Config("eval_samples must be smaller than data.samples".into()));
        }
        if self.data.samples - self.eval_samples < self.clients {
            return Err(Error::Config("not enough training samples for every client".into()));
        }
        match self.target {
            Target::Loss(v) if v > 0.0 => {}
            Target::Accuracy(v) if v > 0.0 && v <= 1.0 => {}
            t => return Err(Error::Config(format!("invalid target {t:?}"))),
        }
        for p in &self.planner.probes {
            if !(p.q > 0.0 && p.q <= 1.0 && p.rank_fraction > 0.0 && p.rank_fraction <= 1.0) {
                return Err(Error::Config(format!("invalid probe {p:?}")));
            }
        }
        if let Some(loss) = self.planner.estimation_loss {
            if !(loss > 0.0 && loss.is_finite()) {
                return Err(Error::Config(format!("estimation_loss must be positive, got {loss}")));
            }
        }
        if self.planner.warmup_rounds == 0 || self.planner.probe_round_cap == 0 || self.planner.probe_repeats == 0 {
            return Err(Error::Config("warmup_rounds, probe_round_cap and probe_repeats must be positive".into()));
        }
        self.strategy.validate()
    }
}
