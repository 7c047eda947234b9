//! Run configuration: JSON with per-field defaults, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::histmatch::HistogramSpec;
use crate::lossstack::LossWeights;
use crate::synthdata::DataConfig;

/// Bumped whenever the model layout changes, so old checkpoints are refused.
pub const ARCH_VERSION: &str = "julnet-toy-2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning rate of the uncertainty network `f_θ`.
    pub uncertainty_lr: f64,
    pub weights: LossWeights,
    pub hist: HistogramSpec,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub enable_un1: bool,
    pub enable_un2: bool,
    pub enable_pe: bool,
    pub enable_sync: bool,
    pub enable_adversarial: bool,
    /// L1 supervision of the predicted-error head.
    pub enable_error_head: bool,
    pub error_head_weight: f64,
    pub eval_every: usize,
    pub sync_pretrain_steps: usize,
    pub sync_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            uncertainty_lr: 1e-3,
            weights: LossWeights::default(),
            hist: HistogramSpec::default(),
            steps: 2000,
            batch: 8,
            seed: 42,
            enable_un1: true,
            enable_un2: true,
            enable_pe: true,
            enable_sync: true,
            enable_adversarial: true,
            enable_error_head: true,
            error_head_weight: 1.0,
            eval_every: 50,
            sync_pretrain_steps: 1000,
            sync_lr: 5e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.uncertainty_lr > 0.0) || !self.uncertainty_lr.is_finite() {
            return Err(Error::config("train.uncertainty_lr", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be at least 1"));
        }
        if self.enable_sync && self.sync_pretrain_steps == 0 {
            return Err(Error::config("train.sync_pretrain_steps", "must be at least 1 when sync is enabled"));
        }
        if !(self.sync_lr > 0.0) {
            return Err(Error::config("train.sync_lr", "must be positive"));
        }
        if !(self.error_head_weight >= 0.0) {
            return Err(Error::config("train.error_head_weight", "must be non-negative"));
        }
        self.weights.validate()?;
        self.hist.validate().map_err(|e| match e {
            Error::Config { path, message } => Error::config(format!("train.{path}"), message),
            other => other,
        })
    }

    /// Whether any part of the uncertainty loss is active.
    pub fn uncertainty_enabled(&self) -> bool {
        self.enable_un1 || self.enable_un2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { train: TrainConfig::default(), data: DataConfig::default(), out_dir: PathBuf::from("runs/default") }
    }
}

impl RunConfig {
    /// Parse and validate; errors carry the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.validate()
    }

    /// First eight bytes of SHA-256 over the architecture tag and the
    /// model-relevant parts of the configuration (the output directory is excluded).
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(ARCH_VERSION.as_bytes());
        h.update(serde_json::to_vec(&self.train).expect("config serializes"));
        h.update(serde_json::to_vec(&self.data).expect("config serializes"));
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
    }
}
