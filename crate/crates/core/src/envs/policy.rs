use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::spec::StateKind;
use super::{EnvError, EnvName, EnvSpec, EnvState};
use crate::data::Action;

pub const EXPERT_GAIN: f64 = 1.0;
pub const MEDIUM_GAIN: f64 = 0.5;
pub const MEDIUM_ACTION_NOISE: f64 = 0.3;
pub const MEDIUM_EPSILON: f64 = 0.4;

/// Scripted data-collection policies of graded quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BehaviorPolicy {
    /// point_reach: proportional controller toward the goal. grid_goal:
    /// shortest path. delay_chain: always match the revealed bit.
    Expert,
    /// point_reach: halved gain plus Gaussian action noise. Discrete envs:
    /// expert with a 0.4 chance of a uniformly random action.
    Medium,
    Random,
    EpsilonExpert { epsilon: f64 },
    /// One component is drawn per episode.
    Mixture { components: Vec<(BehaviorPolicy, f64)> },
}

impl BehaviorPolicy {
    pub fn label(&self) -> String {
        match self {
            BehaviorPolicy::Expert => "expert".into(),
            BehaviorPolicy::Medium => "medium".into(),
            BehaviorPolicy::Random => "random".into(),
            BehaviorPolicy::EpsilonExpert { epsilon } => format!("epsilon_expert({epsilon})"),
            BehaviorPolicy::Mixture { .. } => "mixture".into(),
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            BehaviorPolicy::EpsilonExpert { epsilon } if !(0.0..=1.0).contains(epsilon) => {
                Err(EnvError::Policy(format!("epsilon {epsilon} outside [0, 1]")))
            }
            BehaviorPolicy::Mixture { components } => validate_weights(components),
            _ => Ok(()),
        }
    }

    /// Resolves a mixture to one concrete component for an episode.
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &BehaviorPolicy {
        match self {
            BehaviorPolicy::Mixture { components } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (p, w) in components {
                    acc += w;
                    if u < acc {
                        return p.pick(rng);
                    }
                }
                components.last().expect("non-empty mixture").0.pick(rng)
            }
            p => p,
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, spec: &EnvSpec, state: &EnvState, rng: &mut R) -> Action {
        match self {
            BehaviorPolicy::Expert => expert(spec, state),
            BehaviorPolicy::Random => random(spec, rng),
            BehaviorPolicy::Medium => match spec.name {
                EnvName::PointReach => {
                    let Action::Continuous(mut a) = controller(state, MEDIUM_GAIN) else {
                        unreachable!()
                    };
                    let noise = Normal::new(0.0, MEDIUM_ACTION_NOISE).expect("valid std");
                    for v in a.iter_mut() {
                        *v += noise.sample(rng);
                    }
                    Action::Continuous(a)
                }
                _ => epsilon_expert(spec, state, MEDIUM_EPSILON, rng),
            },
            BehaviorPolicy::EpsilonExpert { epsilon } => epsilon_expert(spec, state, *epsilon, rng),
            BehaviorPolicy::Mixture { .. } => self.pick(rng).clone().act(spec, state, rng),
        }
    }
}

pub(crate) fn validate_weights(components: &[(BehaviorPolicy, f64)]) -> Result<(), EnvError> {
    if components.is_empty() {
        return Err(EnvError::Policy("empty mixture".into()));
    }
    if components.iter().any(|(_, w)| !w.is_finite() || *w < 0.0) {
        return Err(EnvError::Policy("mixture weights must be non-negative".into()));
    }
    let total: f64 = components.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(EnvError::Policy(format!("mixture weights sum to {total}, not 1")));
    }
    for (p, _) in components {
        p.validate()?;
    }
    Ok(())
}

fn controller(state: &EnvState, gain: f64) -> Action {
    match &state.kind {
        StateKind::Point { pos, goal } => Action::Continuous(
            (0..2)
                .map(|i| (gain * (goal[i] - pos[i])).clamp(-1.0, 1.0))
                .collect(),
        ),
        _ => unreachable!("controller is point_reach only"),
    }
}

fn expert(spec: &EnvSpec, state: &EnvState) -> Action {
    match &state.kind {
        StateKind::Point { .. } => controller(state, EXPERT_GAIN),
        StateKind::Grid { pos, goal } => {
            let dist = spec.grid_distances(*goal);
            let n = spec.grid_size;
            let here = dist[pos.1 * n + pos.0];
            let best = (0..4)
                .min_by_key(|&a| {
                    let q = spec.grid_move(*pos, a);
                    (dist[q.1 * n + q.0], a)
                })
                .expect("four actions");
            debug_assert!(here == usize::MAX || here == 0 || {
                let q = spec.grid_move(*pos, best);
                dist[q.1 * n + q.0] + 1 == here
            });
            Action::Discrete(best)
        }
        StateKind::Chain { pattern, .. } => {
            Action::Discrete(usize::from(pattern.get(state.t).copied().unwrap_or(false)))
        }
    }
}

fn random<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Action {
    match spec.action_space() {
        crate::data::ActionSpace::Continuous { dim } => {
            Action::Continuous((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        }
        crate::data::ActionSpace::Discrete { n } => Action::Discrete(rng.gen_range(0..n)),
    }
}

fn epsilon_expert<R: Rng + ?Sized>(spec: &EnvSpec, state: &EnvState, epsilon: f64, rng: &mut R) -> Action {
    if rng.gen::<f64>() < epsilon {
        random(spec, rng)
    } else {
        expert(spec, state)
    }
}
