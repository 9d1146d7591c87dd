use rand::Rng;

use super::policy::validate_weights;
use super::{stream_rng, BehaviorPolicy, EnvError, EnvSpec};
use crate::data::{Dataset, DatasetMeta, Trajectory};

/// Runs one full episode of `policy` (mixtures resolve once, up front).
pub fn rollout<R: Rng + ?Sized>(spec: &EnvSpec, policy: &BehaviorPolicy, rng: &mut R) -> Result<Trajectory, EnvError> {
    spec.validate()?;
    let policy = policy.pick(rng).clone();
    let mut state = spec.reset(rng);
    let (mut states, mut actions, mut rewards) = (vec![], vec![], vec![]);
    while !state.done {
        let obs = spec.observe(&state);
        let action = policy.act(spec, &state, rng);
        let out = spec.step(&state, &action, rng)?;
        states.push(obs);
        actions.push(action);
        rewards.push(out.reward);
        state = out.next;
    }
    Trajectory::new(states, actions, rewards, policy.label()).map_err(|e| EnvError::Invalid(e.to_string()))
}

/// Episode counts per mixture component by largest remainder, so a 50/50
/// split of 100 episodes is exactly 50/50.
fn allocate(weights: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

/// Rolls out `n_episodes` split deterministically across the mixture.
/// Episode `i` draws from its own random stream under `seed`.
pub fn generate_dataset(
    spec: &EnvSpec,
    mix: &[(BehaviorPolicy, f64)],
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset, EnvError> {
    spec.validate()?;
    validate_weights(mix)?;
    if n_episodes == 0 {
        return Err(EnvError::Invalid("n_episodes must be at least 1".into()));
    }
    let counts = allocate(&mix.iter().map(|(_, w)| *w).collect::<Vec<_>>(), n_episodes);
    let mut trajectories = Vec::with_capacity(n_episodes);
    for ((policy, _), count) in mix.iter().zip(counts) {
        for _ in 0..count {
            let mut rng = stream_rng(seed, trajectories.len() as u64);
            trajectories.push(rollout(spec, policy, &mut rng)?);
        }
    }
    let meta = DatasetMeta {
        env: spec.clone(),
        state_dim: spec.state_dim(),
        action_space: spec.action_space(),
        seed,
        policies: mix.iter().map(|(p, w)| (p.label(), *w)).collect(),
    };
    Dataset::new(meta, trajectories).map_err(|e| EnvError::Invalid(e.to_string()))
}
