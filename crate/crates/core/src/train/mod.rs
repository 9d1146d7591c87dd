//! Supervised action-prediction training and return-conditioned
//! evaluation.

mod eval;
mod exact;
mod fit;
mod loss;

pub use eval::{evaluate, EpisodeTrace, EvalRequest, EvalResult, WindowPolicy};
pub use exact::ExactSum;
pub use fit::{metrics_csv, train, write_metrics_csv, EvalPlan, MetricRow, TrainOutcome, TrainSession};
pub use loss::{dc_loss, window_loss_weights};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::envs::EnvError;
use crate::model::ModelError;
use crate::tensor::{AdamWConfig, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("no valid timesteps in batch")]
    NoValidTimesteps,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub updates: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Evaluate every this many updates (and after the last); 0 only
    /// evaluates after the last update.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            updates: 100_000,
            lr: 1e-4,
            warmup_steps: 10_000,
            weight_decay: 1e-4,
            grad_clip: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            warmup_steps: self.warmup_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Targets as multiples of the dataset's best return, see
    /// [`target_for_multiple`].
    pub target_multiples: Vec<f64>,
    /// Absolute targets, used as given.
    pub target_returns: Vec<f64>,
    pub episodes: usize,
    /// Raw head output (continuous) or argmax (discrete); otherwise
    /// discrete actions are sampled from the softmax.
    pub deterministic: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            target_multiples: vec![1.0, 2.0, 5.0, 10.0, 20.0],
            target_returns: vec![],
            episodes: 10,
            deterministic: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.episodes == 0 {
            return Err(TrainError::Config("eval episodes must be positive".into()));
        }
        if self
            .target_multiples
            .iter()
            .chain(&self.target_returns)
            .any(|v| !v.is_finite())
        {
            return Err(TrainError::Config("eval targets must be finite".into()));
        }
        Ok(())
    }

    /// Absolute targets: multiples first, then the explicit returns.
    pub fn targets(&self, max_return: f64, min_return: f64) -> Vec<f64> {
        self.target_multiples
            .iter()
            .map(|&m| target_for_multiple(m, max_return, min_return))
            .chain(self.target_returns.iter().copied())
            .collect()
    }
}

/// Target return for multiple `m` of the dataset's best return, measured
/// from the floor `F = min(0, min_return)`: `F + m * (max_return - F)`.
/// For datasets without negative returns this is plain `m * max_return`;
/// for all-negative returns (dense distance penalties) it keeps larger
/// multiples asking for more.
pub fn target_for_multiple(m: f64, max_return: f64, min_return: f64) -> f64 {
    let floor = min_return.min(0.0);
    floor + m * (max_return - floor)
}
