use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

/// Hyperparameters for [`OptimState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: Some(0.25),
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub lr: f64,
}

/// AdamW moments and step counter, one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Rebuilds a state from stored moments, e.g. when resuming a run.
    pub fn from_parts(
        config: AdamWConfig,
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    ) -> Result<Self, TensorError> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len()) {
            return Err(TensorError::InvalidArgument {
                op: "OptimState::from_parts",
                msg: "moment buffers disagree in shape".into(),
            });
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Learning rate used by update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.config.warmup_steps;
        if warm == 0 {
            self.config.lr
        } else {
            self.config.lr * (step as f64 / warm as f64).min(1.0)
        }
    }

    /// One AdamW update. Gradients are clipped to the global norm threshold
    /// first; any non-finite gradient rejects the update and leaves both
    /// parameters and state untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<StepReport, TensorError> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(TensorError::InvalidArgument {
                op: "adamw_step",
                msg: format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            });
        }
        let mut sq = 0.0;
        for (pi, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.first[pi].len() != p.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (i, v) in g.data().iter().enumerate() {
                if !v.is_finite() {
                    return Err(TensorError::NonFiniteGradient { param: pi, index: i });
                }
                sq += v * v;
            }
        }
        let grad_norm = sq.sqrt();
        let clip_scale = match self.config.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step;
        let lr = self.lr_at(t);
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[pi], &mut self.second[pi]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] * clip_scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepReport {
            grad_norm,
            clip_scale,
            lr,
        })
    }
}
