use serde::{Deserialize, Serialize};

use super::DataError;

/// One action: a class label for discrete spaces, a vector otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionSpace {
    Continuous { dim: usize },
    Discrete { n: usize },
}

impl ActionSpace {
    /// Width of the encoded action (vector length or one-hot width).
    pub fn width(&self) -> usize {
        match *self {
            ActionSpace::Continuous { dim } => dim,
            ActionSpace::Discrete { n } => n,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete { .. })
    }

    pub fn accepts(&self, a: &Action) -> bool {
        match (self, a) {
            (ActionSpace::Continuous { dim }, Action::Continuous(v)) => v.len() == *dim,
            (ActionSpace::Discrete { n }, Action::Discrete(k)) => k < n,
            _ => false,
        }
    }

    /// Model-facing encoding: the raw vector, or a one-hot row.
    pub fn encode(&self, a: &Action) -> Vec<f64> {
        match (self, a) {
            (ActionSpace::Continuous { .. }, Action::Continuous(v)) => v.clone(),
            (ActionSpace::Discrete { n }, Action::Discrete(k)) => {
                let mut v = vec![0.0; *n];
                v[*k] = 1.0;
                v
            }
            _ => panic!("action {a:?} does not belong to {self:?}"),
        }
    }

    pub fn label(&self, a: &Action) -> usize {
        match a {
            Action::Discrete(k) => *k,
            Action::Continuous(_) => 0,
        }
    }
}

/// Undiscounted suffix sums: `rtg[t] = sum_{t' >= t} rewards[t']`.
pub fn compute_rtg(rewards: &[f64]) -> Result<Vec<f64>, DataError> {
    if rewards.is_empty() {
        return Err(DataError::EmptyRewards);
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(DataError::NonFiniteReward(i));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc += r;
        out[i] = acc;
    }
    Ok(out)
}

/// One episode plus its return-to-go labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub rtgs: Vec<f64>,
    /// Label of the behavior policy that produced the episode.
    pub policy: String,
}

impl Trajectory {
    pub fn new(
        states: Vec<Vec<f64>>,
        actions: Vec<Action>,
        rewards: Vec<f64>,
        policy: impl Into<String>,
    ) -> Result<Self, DataError> {
        if states.len() != actions.len() || states.len() != rewards.len() {
            return Err(DataError::LengthMismatch {
                states: states.len(),
                actions: actions.len(),
                rewards: rewards.len(),
            });
        }
        let rtgs = compute_rtg(&rewards)?;
        Ok(Self {
            states,
            actions,
            rewards,
            rtgs,
            policy: policy.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Total episode return, `rtg[0]`.
    pub fn total_return(&self) -> f64 {
        self.rtgs[0]
    }

    pub fn validate(&self, state_dim: usize, space: ActionSpace) -> Result<(), DataError> {
        for (i, s) in self.states.iter().enumerate() {
            if s.len() != state_dim {
                return Err(DataError::BadStateDim {
                    index: i,
                    got: s.len(),
                    expected: state_dim,
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    what: format!("state {i}"),
                });
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            if !space.accepts(a) {
                return Err(DataError::BadAction { index: i, space });
            }
            if let Action::Continuous(v) = a {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(DataError::NonFinite {
                        what: format!("action {i}"),
                    });
                }
            }
        }
        Ok(())
    }
}
