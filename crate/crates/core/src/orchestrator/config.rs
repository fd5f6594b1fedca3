use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{GammaReference, MeanWeighting, Thresholds, UpdateScale};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::scheduling::StrategyKind;
use crate::wireless::WirelessConfig;

/// One simulation run. Every field except `num_clients` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_clients: usize,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub wireless: WirelessConfig,
    #[serde(default = "defaults::max_rounds")]
    pub max_rounds: usize,
    /// Total simulated-time budget in seconds; `None` is unlimited.
    #[serde(default)]
    pub time_budget_s: Option<f64>,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// `eta_r = learning_rate / (1 + lr_decay * (r - 1))`.
    #[serde(default)]
    pub lr_decay: f64,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "defaults::strategy")]
    pub strategy: StrategyKind,
    #[serde(default)]
    pub gamma_reference: GammaReference,
    /// Cluster mean update compared against `eps1`.
    #[serde(default)]
    pub split_mean: MeanWeighting,
    /// Normalization of client updates in the split and stopping tests.
    #[serde(default)]
    pub update_scale: UpdateScale,
    /// Evaluate test accuracy every this many rounds (and always on the last).
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    /// Run local training of a round on the rayon pool.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use crate::scheduling::StrategyKind;

    pub fn max_rounds() -> usize {
        200
    }
    pub fn epochs() -> usize {
        1
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn learning_rate() -> f64 {
        0.05
    }
    pub fn strategy() -> StrategyKind {
        StrategyKind::ProposedTwoPhase
    }
    pub fn eval_every() -> usize {
        1
    }
}

impl ExperimentConfig {
    /// Defaults with the given client count.
    pub fn with_clients(num_clients: usize) -> Self {
        serde_json::from_value(serde_json::json!({ "num_clients": num_clients }))
            .expect("defaults deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.data.validate(self.num_clients).map_err(cfg)?;
        self.wireless.validate().map_err(cfg)?;
        self.thresholds.validate().map_err(cfg)?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config("lr_decay must be >= 0".into()));
        }
        if let Some(t) = self.time_budget_s {
            if !(t > 0.0) {
                return Err(Error::Config("time_budget_s must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, round: usize) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay * round.saturating_sub(1) as f64)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
