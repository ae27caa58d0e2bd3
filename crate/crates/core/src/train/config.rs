use serde::{Deserialize, Serialize};

use super::losses::LossWeights;
use super::optim::LrMultipliers;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Contrastive training of the retrieval embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReidConfig {
    pub steps: usize,
    pub ids_per_batch: usize,
    pub views_per_id: usize,
    pub temperature: f64,
    pub lr: f64,
}

impl Default for ReidConfig {
    fn default() -> Self {
        ReidConfig {
            steps: 200,
            ids_per_batch: 8,
            views_per_id: 4,
            temperature: 0.1,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate. Higher than for a pretrained encoder since
    /// everything here trains from scratch.
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    /// Epochs after which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub lr_mult: LrMultipliers,
    pub loss: LossWeights,
    /// Supervision points per class mask.
    pub points: usize,
    pub oversample: f64,
    pub importance: f64,
    /// Seed of the surrogate label embeddings.
    pub label_seed: u64,
    /// Validate every this many epochs (0 = only at the end).
    pub val_every: usize,
    pub reid: ReidConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_iters: 100,
            milestones: vec![12, 16, 18],
            gamma: 0.1,
            lr_mult: LrMultipliers::default(),
            loss: LossWeights::default(),
            points: 256,
            oversample: 3.0,
            importance: 0.75,
            label_seed: 0,
            val_every: 1,
            reid: ReidConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive and finite", self.lr)));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "milestones {:?} must be strictly ascending",
                self.milestones
            )));
        }
        if !(0.0..=1.0).contains(&self.importance) || self.oversample < 1.0 || self.points == 0 {
            return Err(Error::Config("point sampling needs points ≥ 1, oversample ≥ 1, importance in [0,1]".into()));
        }
        self.loss.validate()
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}
