//! Dual-task objective, data mixing, augmentation and the training loop.

pub mod data;
pub mod loss;
pub mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predictor::PredictorConfig;
use crate::semantic::EncoderKind;
use crate::wavelet::WaveletMode;

pub use data::{augment_flip, sample_batch, Batch};
pub use loss::{assemble_loss, latent_losses, latent_losses_var, total_loss, LossReport};
pub use optim::{optimizer_step, AdamW, AdamWConfig, MomentState};
pub use run::{evaluate_model, train, EvalRecord, StepRecord, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_rgb: f64,
    pub lambda_wv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rgb: 1.0,
            lambda_wv: 0.1,
        }
    }
}

/// Which wavelet regularizer, if any, joins the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Edge,
    Interior,
    LlOnly,
    NoWavelet,
}

impl LossMode {
    pub fn wavelet(self) -> Option<WaveletMode> {
        match self {
            LossMode::Edge => Some(WaveletMode::Edge),
            LossMode::Interior => Some(WaveletMode::Interior),
            LossMode::LlOnly => Some(WaveletMode::LlOnly),
            LossMode::NoWavelet => None,
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(Self::Edge),
            "interior" => Ok(Self::Interior),
            "ll_only" => Ok(Self::LlOnly),
            "no_wavelet" | "none" => Ok(Self::NoWavelet),
            other => Err(Error::arg(
                "loss_mode",
                format!("unknown mode {other:?} (edge | interior | ll_only | no_wavelet)"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub encoder: EncoderKind,
    /// `false` replaces the semantic tokens with zeros.
    pub semantic: bool,
    /// Sampling weight per training source.
    pub mixture: Vec<f64>,
    pub weights: LossWeights,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub flip_prob: f64,
    /// Checkpoint cadence in steps (0: final checkpoint only).
    pub checkpoint_every: usize,
    /// Held-out evaluation cadence in steps (0: final evaluation only).
    pub eval_every: usize,
    /// Gradient norms above this are logged as warnings; never clipped.
    pub grad_warn_norm: f64,
    /// Omit wall-clock times from logs so reruns are byte-identical.
    pub deterministic: bool,
    pub predictor: PredictorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            loss_mode: LossMode::Edge,
            encoder: EncoderKind::Default,
            semantic: true,
            mixture: vec![1.0],
            weights: LossWeights::default(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            flip_prob: 0.5,
            checkpoint_every: 0,
            eval_every: 0,
            grad_warn_norm: 100.0,
            deterministic: true,
            predictor: PredictorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Published full-scale settings: lr 3e-5, total batch 32, 15 000 steps,
    /// four sources mixed 35:15:45:5. Kept for reference; the desk defaults
    /// differ.
    pub fn published_scale() -> Self {
        Self {
            lr: 3e-5,
            batch_size: 32,
            steps: 15_000,
            mixture: vec![35.0, 15.0, 45.0, 5.0],
            ..Self::default()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn effective_encoder(&self) -> EncoderKind {
        if self.semantic {
            self.encoder
        } else {
            EncoderKind::Off
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg("lr", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch_size", "must be positive"));
        }
        if self.mixture.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || self.mixture.iter().sum::<f64>() <= 0.0 {
            return Err(Error::arg("mixture", "weights must be non-negative with a positive sum"));
        }
        if self.weights.lambda_rgb < 0.0 || self.weights.lambda_wv < 0.0 {
            return Err(Error::arg("weights", "loss weights must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::arg("flip_prob", "must lie in [0,1]"));
        }
        self.predictor.validate()
    }
}
