//! Model and training configuration.
//!
//! JSON config files may specify any subset of fields; omitted fields take
//! the defaults below (the reference settings: three 64-unit message-passing
//! layers, latent width 32, Adam at 0.001, edge dropout 0.3, Min-Max
//! normalization).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormMode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// Learnable scalar per category plus a missing token, refined by
    /// self-attention across a sample's categorical features.
    Hetero,
    /// One binary feature node per category.
    Onehot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjInit {
    /// Logits drawn from N(0, 0.1²).
    Random,
    /// Logits seeded from k=10 nearest neighbors on mean-filled features.
    Knn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub mode: EmbeddingMode,
    pub d_tok: usize,
    pub layers: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            mode: EmbeddingMode::Hetero,
            d_tok: 16,
            layers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub edge_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 3,
            hidden: 64,
            edge_dropout: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VgaeConfig {
    pub latent: usize,
    /// Weight of the negated ELBO in the total loss.
    pub beta: f64,
    /// Linear 0→1 ramp of the KL term over the first 10% of epochs.
    pub kl_warmup: bool,
    pub adj_init: AdjInit,
}

impl Default for VgaeConfig {
    fn default() -> Self {
        VgaeConfig {
            latent: 32,
            beta: 1.0,
            kl_warmup: false,
            adj_init: AdjInit::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs between graph refinements.
    pub refine_period: usize,
    pub seed: u64,
    pub normalization: NormMode,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 20_000,
            lr: 0.001,
            refine_period: 100,
            seed: 0,
            normalization: NormMode::Minmax,
        }
    }
}

/// Number of epochs for desk-scale runs; the reference setting of 20,000
/// remains the config default.
pub const DESK_EPOCHS: usize = 3000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub embedding: EmbeddingConfig,
    pub encoder: EncoderConfig,
    pub vgae: VgaeConfig,
    pub train: TrainSettings,
}

impl Config {
    /// Desk preset: defaults with 3000 epochs.
    pub fn desk() -> Self {
        let mut cfg = Config::default();
        cfg.train.epochs = DESK_EPOCHS;
        cfg
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.lr <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.train.lr
            )));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.encoder.edge_dropout) {
            return Err(Error::Config(format!(
                "edge_dropout must lie in [0,1), got {}",
                self.encoder.edge_dropout
            )));
        }
        if self.vgae.beta < 0.0 {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.encoder.layers == 0 || self.encoder.hidden == 0 || self.vgae.latent == 0 {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.train.refine_period == 0 {
            return Err(Error::Config("refine_period must be at least 1".into()));
        }
        Ok(())
    }
}
