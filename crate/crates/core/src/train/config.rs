use std::fs;
use std::path::Path;

use bridgeseg_tensor::AdamConfig;
use serde::{Deserialize, Serialize};

use crate::bridge::{DiscriminatorConfig, GeneratorConfig, SBLossWeights, TimeSchedule};
use crate::error::{ensure_arg, Error, Result};
use crate::seg::SegConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "E2E")]
    E2E,
    #[serde(rename = "TWO_STAGE")]
    TwoStage,
}

/// Training configuration; its JSON form is the CLI config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    /// Segmentation epochs of the second stage; `epochs` when absent.
    pub seg_epochs: Option<usize>,
    pub lr: f64,
    /// Final epochs over which the learning rate decays linearly towards 0;
    /// half of `epochs` when absent.
    pub decay_epochs: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: TimeSchedule,
    pub weights: SBLossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub seg: SegConfig,
    /// Checkpoint period in epochs; the last epoch is always saved.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::E2E,
            epochs: 15,
            seg_epochs: None,
            lr: 2e-4,
            decay_epochs: None,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            seed: 0,
            schedule: TimeSchedule::default(),
            weights: SBLossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            seg: SegConfig::default(),
            checkpoint_every: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.epochs >= 1, "epochs must be >= 1");
        ensure_arg!(self.seg_epochs != Some(0), "seg_epochs must be >= 1");
        ensure_arg!(
            self.lr > 0.0 && self.lr.is_finite(),
            "lr must be positive, got {}",
            self.lr
        );
        ensure_arg!(
            self.decay_epochs.is_none_or(|d| d <= self.epochs),
            "decay_epochs must not exceed epochs"
        );
        ensure_arg!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure_arg!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure_arg!(self.checkpoint_every >= 1, "checkpoint_every must be >= 1");
        SBLossWeights::new(self.weights.lambda_sb, self.weights.lambda_reg)?;
        self.generator.validate()?;
        self.seg.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Learning rate of a 1-based epoch in a stage of `epochs` epochs.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let decay = self.decay_epochs.unwrap_or(epochs / 2).min(epochs);
        let start = epochs - decay;
        if epoch <= start {
            self.lr
        } else {
            self.lr * (1.0 - (epoch - start) as f64 / (decay + 1) as f64)
        }
    }

    pub fn stage2_epochs(&self) -> usize {
        self.seg_epochs.unwrap_or(self.epochs)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        config.validate()?;
        Ok(config)
    }
}
