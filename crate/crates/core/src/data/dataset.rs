use serde::{Deserialize, Serialize};

use super::{ActionSpace, DataError, Trajectory};
use crate::envs::EnvSpec;

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension z-score statistics over every stored state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions whose std was clamped to [`STD_FLOOR`].
    #[serde(default)]
    pub floored: Vec<usize>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            floored: vec![],
        }
    }

    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, sd))| (x - m) / sd)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReturnStats {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
}

/// Provenance recorded in the dataset header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub env: EnvSpec,
    pub state_dim: usize,
    pub action_space: ActionSpace,
    pub seed: u64,
    /// Behavior policies in the mixture, with their weights.
    pub policies: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub stats: NormStats,
    pub trajectories: Vec<Trajectory>,
    normalized: bool,
}

impl Dataset {
    /// Validates the episodes and computes normalization statistics.
    pub fn new(meta: DatasetMeta, trajectories: Vec<Trajectory>) -> Result<Self, DataError> {
        if trajectories.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        for t in &trajectories {
            t.validate(meta.state_dim, meta.action_space)?;
        }
        let stats = compute_stats(meta.state_dim, &trajectories);
        Ok(Self {
            meta,
            stats,
            trajectories,
            normalized: false,
        })
    }

    pub(crate) fn from_parts(meta: DatasetMeta, stats: NormStats, trajectories: Vec<Trajectory>) -> Self {
        Self {
            meta,
            stats,
            trajectories,
            normalized: false,
        }
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(Trajectory::total_return).collect()
    }

    pub fn return_stats(&self) -> ReturnStats {
        let r = self.returns();
        ReturnStats {
            max: r.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min: r.iter().copied().fold(f64::INFINITY, f64::min),
            mean: r.iter().sum::<f64>() / r.len() as f64,
        }
    }

    /// Z-scores every state with the dataset-wide statistics. Returns the
    /// statistics, the transformed copy and one warning per clamped
    /// dimension.
    pub fn normalize_states(&self) -> (NormStats, Dataset, Vec<String>) {
        let stats = compute_stats(self.meta.state_dim, &self.trajectories);
        let warnings = stats
            .floored
            .iter()
            .map(|d| format!("state dimension {d} has zero variance; std clamped to {STD_FLOOR}"))
            .collect();
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| Trajectory {
                states: t.states.iter().map(|s| stats.apply(s)).collect(),
                ..t.clone()
            })
            .collect();
        let out = Dataset {
            meta: self.meta.clone(),
            stats: stats.clone(),
            trajectories,
            normalized: true,
        };
        (stats, out, warnings)
    }
}

fn compute_stats(dim: usize, trajectories: &[Trajectory]) -> NormStats {
    let n: usize = trajectories.iter().map(Trajectory::len).sum();
    let mut mean = vec![0.0; dim];
    for s in trajectories.iter().flat_map(|t| &t.states) {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for s in trajectories.iter().flat_map(|t| &t.states) {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let mut floored = vec![];
    let std = var
        .iter()
        .enumerate()
        .map(|(d, v)| {
            let sd = (v / n as f64).sqrt();
            if sd < STD_FLOOR {
                floored.push(d);
                STD_FLOOR
            } else {
                sd
            }
        })
        .collect();
    NormStats { mean, std, floored }
}
