use rand::Rng;

use super::{ExactSum, TrainError};
use crate::data::{Action, ActionSpace, NormStats, PaddedWindow};
use crate::envs::{stream_rng, EnvSpec, EnvState};
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

/// Anything that maps K-step windows to per-timestep head outputs.
pub trait WindowPolicy {
    fn context_len(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// `[B*K x width]` outputs; only the last row of each window is acted on.
    fn predict(&self, windows: &[PaddedWindow]) -> Result<Tensor, ModelError>;
}

impl WindowPolicy for Model {
    fn context_len(&self) -> usize {
        self.config().context_len
    }

    fn action_space(&self) -> ActionSpace {
        self.config().action_space.expect("validated model has an action space")
    }

    fn predict(&self, windows: &[PaddedWindow]) -> Result<Tensor, ModelError> {
        Model::predict(self, windows)
    }
}

/// Sampling draws come from a stream disjoint from the environment's, so
/// deterministic and sampled heads see identical dynamics noise.
const SAMPLE_STREAM_BASE: u64 = 1 << 40;

pub struct EvalRequest<'a> {
    pub spec: &'a EnvSpec,
    /// Applied to raw observations, as during training.
    pub norm: &'a NormStats,
    pub target: f64,
    pub episodes: usize,
    pub deterministic: bool,
    /// Episode `i` runs on stream `i` under this seed.
    pub seed: u64,
    /// Edits each window after it is built (modal zero-out).
    pub transform: Option<&'a dyn Fn(&mut PaddedWindow)>,
    /// Keep per-step bookkeeping in [`EvalResult::traces`].
    pub trace: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    pub rewards: Vec<f64>,
    /// Running return-to-go before each step, as exact partials.
    pub rtg_partials: Vec<Vec<f64>>,
    /// The rounded return-to-go the model saw at each step.
    pub rtg_inputs: Vec<f64>,
    /// Last timestep covered by each context window.
    pub window_ends: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub target: f64,
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub traces: Vec<EpisodeTrace>,
}

struct Episode {
    state: EnvState,
    rng: rand_chacha::ChaCha8Rng,
    sample_rng: rand_chacha::ChaCha8Rng,
    rtg: ExactSum,
    rtgs: Vec<f64>,
    states: Vec<Vec<f64>>,
    actions: Vec<Action>,
    rewards: Vec<f64>,
    trace: EpisodeTrace,
}

fn choose<R: Rng + ?Sized>(row: &[f64], space: ActionSpace, deterministic: bool, rng: &mut R) -> Action {
    match space {
        ActionSpace::Continuous { .. } => Action::Continuous(row.to_vec()),
        ActionSpace::Discrete { .. } => {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if deterministic {
                // first maximal logit
                return Action::Discrete(row.iter().position(|&v| v == max).unwrap_or(0));
            }
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let mut u = rng.gen::<f64>() * exps.iter().sum::<f64>();
            for (i, e) in exps.iter().enumerate() {
                if u < *e {
                    return Action::Discrete(i);
                }
                u -= e;
            }
            Action::Discrete(exps.len() - 1)
        }
    }
}

/// Runs `episodes` return-conditioned episodes in lockstep, batching every
/// live episode's window into one forward pass per step.
///
/// The running return-to-go starts at the target and drops by each
/// reward; it is kept exactly and rounded once per step for the model.
pub fn evaluate<P: WindowPolicy + ?Sized>(policy: &P, req: &EvalRequest) -> Result<EvalResult, TrainError> {
    // a zero horizon is rejected for data generation but evaluates to
    // empty episodes
    if req.spec.horizon > 0 {
        req.spec.validate()?;
    }
    if req.episodes == 0 {
        return Err(TrainError::Config("eval episodes must be positive".into()));
    }
    if !req.target.is_finite() {
        return Err(TrainError::Config(format!("target {} is not finite", req.target)));
    }
    let space = policy.action_space();
    if space != req.spec.action_space() {
        return Err(TrainError::Config(format!(
            "policy action space {space:?} does not match environment {:?}",
            req.spec.action_space()
        )));
    }
    let k = policy.context_len();
    let mut eps: Vec<Episode> = (0..req.episodes)
        .map(|i| {
            let mut rng = stream_rng(req.seed, i as u64);
            let state = req.spec.reset(&mut rng);
            Episode {
                state,
                rng,
                sample_rng: stream_rng(req.seed, SAMPLE_STREAM_BASE + i as u64),
                rtg: ExactSum::new(req.target),
                rtgs: vec![],
                states: vec![],
                actions: vec![],
                rewards: vec![],
                trace: EpisodeTrace::default(),
            }
        })
        .collect();

    loop {
        let live: Vec<usize> = (0..eps.len()).filter(|&i| !eps[i].state.done).collect();
        if live.is_empty() {
            break;
        }
        let mut windows = Vec::with_capacity(live.len());
        for &i in &live {
            let ep = &mut eps[i];
            ep.states.push(req.norm.apply(&req.spec.observe(&ep.state)));
            let rtg_in = ep.rtg.value();
            ep.rtgs.push(rtg_in);
            let t = ep.states.len() - 1;
            let mut w = PaddedWindow::from_history(k, t, &ep.rtgs, &ep.states, &ep.actions, space, i);
            if let Some(f) = req.transform {
                f(&mut w);
            }
            if req.trace {
                ep.trace.rtg_partials.push(ep.rtg.partials().to_vec());
                ep.trace.rtg_inputs.push(rtg_in);
                ep.trace.window_ends.push(w.end);
            }
            windows.push(w);
        }
        let preds = policy.predict(&windows)?;
        for (j, &i) in live.iter().enumerate() {
            let ep = &mut eps[i];
            let action = choose(preds.row(j * k + k - 1), space, req.deterministic, &mut ep.sample_rng);
            let out = req.spec.step(&ep.state, &action, &mut ep.rng)?;
            ep.rtg.sub(out.reward);
            ep.rewards.push(out.reward);
            ep.actions.push(action);
            ep.state = out.next;
        }
    }

    // summed back to front, the same order as episode returns in datasets
    let returns: Vec<f64> = eps.iter().map(|e| e.rewards.iter().rev().fold(0.0, |a, r| a + r)).collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let traces = if req.trace {
        eps.into_iter()
            .map(|mut e| {
                e.trace.rewards = e.rewards;
                e.trace
            })
            .collect()
    } else {
        vec![]
    };
    Ok(EvalResult {
        target: req.target,
        returns,
        mean,
        std,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{rollout, BehaviorPolicy};

    /// Proportional controller read straight off the (unnormalized) window.
    struct ExpertReplay;

    impl WindowPolicy for ExpertReplay {
        fn context_len(&self) -> usize {
            3
        }

        fn action_space(&self) -> ActionSpace {
            ActionSpace::Continuous { dim: 2 }
        }

        fn predict(&self, windows: &[PaddedWindow]) -> Result<Tensor, ModelError> {
            let rows: Vec<Vec<f64>> = windows
                .iter()
                .flat_map(|w| {
                    w.states.iter().map(|s| {
                        (0..2).map(|i| (s[i + 2] - s[i]).clamp(-1.0, 1.0)).collect()
                    })
                })
                .collect();
            Ok(Tensor::from_rows(&rows)?)
        }
    }

    fn request<'a>(spec: &'a EnvSpec, norm: &'a NormStats, target: f64) -> EvalRequest<'a> {
        EvalRequest {
            spec,
            norm,
            target,
            episodes: 6,
            deterministic: true,
            seed: 21,
            transform: None,
            trace: true,
        }
    }

    #[test]
    fn expert_replay_reproduces_expert_returns() {
        let spec = EnvSpec {
            noise: 0.0,
            ..EnvSpec::point_reach()
        };
        let norm = NormStats::identity(4);
        let res = evaluate(&ExpertReplay, &request(&spec, &norm, -3.0)).unwrap();
        for (i, r) in res.returns.iter().enumerate() {
            let t = rollout(&spec, &BehaviorPolicy::Expert, &mut stream_rng(21, i as u64)).unwrap();
            assert_eq!(*r, t.total_return());
        }
    }

    #[test]
    fn windows_end_at_current_step() {
        let spec = EnvSpec::point_reach();
        let norm = NormStats::identity(4);
        let res = evaluate(&ExpertReplay, &request(&spec, &norm, 1.0)).unwrap();
        for tr in &res.traces {
            assert_eq!(tr.window_ends, (0..tr.rewards.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn horizon_zero_returns_zero() {
        let spec = EnvSpec {
            horizon: 0,
            ..EnvSpec::point_reach()
        };
        let norm = NormStats::identity(4);
        let res = evaluate(&ExpertReplay, &request(&spec, &norm, 5.0)).unwrap();
        assert!(res.returns.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn repeated_runs_agree() {
        let spec = EnvSpec::point_reach();
        let norm = NormStats::identity(4);
        let a = evaluate(&ExpertReplay, &request(&spec, &norm, 2.0)).unwrap();
        let b = evaluate(&ExpertReplay, &request(&spec, &norm, 2.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_logit_wins_ties() {
        let mut rng = stream_rng(0, 0);
        let space = ActionSpace::Discrete { n: 3 };
        assert_eq!(choose(&[1.0, 3.0, 3.0], space, true, &mut rng), Action::Discrete(1));
        let picks: Vec<Action> = (0..200).map(|_| choose(&[0.0, 50.0, 0.0], space, false, &mut rng)).collect();
        assert!(picks.iter().all(|a| *a == Action::Discrete(1)));
    }
}
