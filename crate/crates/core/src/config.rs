//! Run configuration: one flat TOML table holding every [`ModelConfig`] and
//! [`TrainConfig`] key. Missing keys take their defaults, unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, Schedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    /// Sampled from the learned policy.
    #[default]
    Learned,
    /// Evenly spaced at `target_rate`; the policy is not trained.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_bytes: u64,
    pub training_bytes: u64,
    pub batch_size: usize,
    /// Rows whose graphs are held at once; 0 holds the whole batch.
    pub micro_batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip: f64,
    /// Master seed; must fit in 63 bits to round-trip through TOML.
    pub seed: u64,
    pub checkpoint_every: u64,
    pub boundaries: BoundaryKind,
    /// Training corpus (text or binary format).
    pub data: String,
    /// Directory for checkpoints and `metrics.csv`.
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            warmup_bytes: 200_000,
            training_bytes: 10_000_000,
            batch_size: 16,
            micro_batch: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            min_lr_ratio: 0.1,
            grad_clip: 0.0,
            seed: 0,
            checkpoint_every: 500,
            boundaries: BoundaryKind::Learned,
            data: String::new(),
            out_dir: "run".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if self.warmup_bytes >= self.training_bytes {
            return Err(Error::Config(format!(
                "warmup_bytes {} must be below training_bytes {}",
                self.warmup_bytes, self.training_bytes
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in 63 bits".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak: self.learning_rate,
            warmup: self.warmup_bytes,
            total: self.training_bytes,
            floor_ratio: self.min_lr_ratio,
        }
    }

    /// Rows per graph-holding chunk.
    pub fn micro_batch_rows(&self) -> usize {
        if self.micro_batch == 0 {
            self.batch_size
        } else {
            self.micro_batch
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let model_keys = keys_of(&ModelConfig::default())?;
        let (mut model, mut train) = (toml::Table::new(), toml::Table::new());
        for (k, v) in table {
            if model_keys.contains(&k) {
                model.insert(k, v);
            } else {
                train.insert(k, v);
            }
        }
        let cfg = Self {
            model: model.try_into().map_err(|e| Error::Config(format!("{e}")))?,
            train: train.try_into().map_err(|e| Error::Config(format!("{e}")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut table = toml::Table::try_from(&self.model).map_err(|e| Error::Config(format!("{e}")))?;
        table.extend(toml::Table::try_from(&self.train).map_err(|e| Error::Config(format!("{e}")))?);
        Ok(table.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

fn keys_of<T: Serialize>(value: &T) -> Result<Vec<String>> {
    let t = toml::Table::try_from(value).map_err(|e| Error::Config(format!("{e}")))?;
    Ok(t.keys().cloned().collect())
}
