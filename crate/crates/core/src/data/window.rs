use rand::Rng;

use super::{Action, ActionSpace, DataError, Dataset, Trajectory};

/// A K-step slice `tau_{t-K+1..t}` ending at `(rtg_t, s_t)`, left-padded
/// with zeros where the episode starts inside the window.
///
/// `actions` holds K encoded actions: the first K-1 are model inputs, the
/// last is the training target for `s_t` (zero when unknown, e.g. during
/// evaluation). `labels` mirrors `actions` for discrete spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedWindow {
    pub rtgs: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub traj: usize,
    pub end: usize,
}

impl PaddedWindow {
    pub fn context_len(&self) -> usize {
        self.mask.len()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Builds the window ending at timestep `end` from per-step histories.
    /// `actions` may be one shorter than `states` (the current action is
    /// not known yet).
    pub fn from_history(
        k: usize,
        end: usize,
        rtgs: &[f64],
        states: &[Vec<f64>],
        actions: &[Action],
        space: ActionSpace,
        traj: usize,
    ) -> Self {
        let state_dim = states[end].len();
        let width = space.width();
        let mut w = PaddedWindow {
            rtgs: vec![0.0; k],
            states: vec![vec![0.0; state_dim]; k],
            actions: vec![vec![0.0; width]; k],
            labels: vec![0; k],
            mask: vec![false; k],
            traj,
            end,
        };
        for slot in 0..k {
            let Some(t) = (end + slot + 1).checked_sub(k) else { continue };
            w.mask[slot] = true;
            w.rtgs[slot] = rtgs[t];
            w.states[slot] = states[t].clone();
            if let Some(a) = actions.get(t) {
                w.actions[slot] = space.encode(a);
                w.labels[slot] = space.label(a);
            }
        }
        w
    }

    pub fn from_trajectory(t: &Trajectory, traj: usize, end: usize, k: usize, space: ActionSpace) -> Self {
        Self::from_history(k, end, &t.rtgs, &t.states, &t.actions, space, traj)
    }

    pub fn check_len(&self, k: usize) -> Result<(), DataError> {
        let lens = [
            self.rtgs.len(),
            self.states.len(),
            self.actions.len(),
            self.labels.len(),
            self.mask.len(),
        ];
        match lens.iter().find(|&&l| l != k) {
            Some(&got) => Err(DataError::WindowLength { got, expected: k }),
            None => Ok(()),
        }
    }
}

/// Draws one window with every stored timestep equally likely, i.e. the
/// trajectory is chosen with probability proportional to its length.
pub fn sample_subtrajectory<R: Rng + ?Sized>(dataset: &Dataset, k: usize, rng: &mut R) -> PaddedWindow {
    let total = dataset.total_steps();
    let mut idx = rng.gen_range(0..total);
    for (ti, t) in dataset.trajectories.iter().enumerate() {
        if idx < t.len() {
            return PaddedWindow::from_trajectory(t, ti, idx, k, dataset.meta.action_space);
        }
        idx -= t.len();
    }
    unreachable!("index below total step count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetMeta;
    use crate::envs::EnvSpec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn traj(len: usize) -> Trajectory {
        Trajectory::new(
            (0..len).map(|i| vec![i as f64 + 1.0, -(i as f64) - 1.0]).collect(),
            (0..len).map(|i| Action::Discrete(1 + i % 2)).collect(),
            (0..len).map(|i| 1.0 + i as f64).collect(),
            "expert",
        )
        .unwrap()
    }

    fn dataset(lens: &[usize]) -> Dataset {
        Dataset::new(
            DatasetMeta {
                env: EnvSpec::default(),
                state_dim: 2,
                action_space: ActionSpace::Discrete { n: 3 },
                seed: 0,
                policies: vec![("expert".into(), 1.0)],
            },
            lens.iter().map(|&l| traj(l)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn maximal_padding_at_episode_start() {
        let t = traj(20);
        let w = PaddedWindow::from_trajectory(&t, 0, 0, 8, ActionSpace::Discrete { n: 3 });
        assert_eq!(w.valid_count(), 1);
        assert_eq!(w.mask.iter().filter(|m| !**m).count(), 7);
        assert!(w.mask[7]);
        assert_eq!(w.states[7], t.states[0]);
    }

    #[test]
    fn full_window_when_t_at_least_k() {
        let t = traj(20);
        let w = PaddedWindow::from_trajectory(&t, 0, 9, 8, ActionSpace::Discrete { n: 3 });
        assert!(w.mask.iter().all(|m| *m));
        assert_eq!(w.rtgs[7], t.rtgs[9]);
        assert_eq!(w.rtgs[0], t.rtgs[2]);
    }

    #[test]
    fn seeded_sampling_replays() {
        let ds = dataset(&[3, 10, 7]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_subtrajectory(&ds, 4, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn sampling_is_uniform_over_timesteps() {
        let ds = dataset(&[2, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let short = (0..n)
            .filter(|_| sample_subtrajectory(&ds, 4, &mut rng).traj == 0)
            .count();
        let frac = short as f64 / n as f64;
        assert!((frac - 0.2).abs() < 0.015, "{frac}");
    }

    proptest! {
        #[test]
        fn masked_positions_are_zero(len in 1usize..15, end_frac in 0.0f64..1.0, k in 1usize..10) {
            let t = traj(len);
            let end = ((len as f64 * end_frac) as usize).min(len - 1);
            let w = PaddedWindow::from_trajectory(&t, 0, end, k, ActionSpace::Discrete { n: 3 });
            w.check_len(k).unwrap();
            for i in 0..k {
                if !w.mask[i] {
                    prop_assert_eq!(w.rtgs[i], 0.0);
                    prop_assert!(w.states[i].iter().all(|v| *v == 0.0));
                    prop_assert!(w.actions[i].iter().all(|v| *v == 0.0));
                    prop_assert_eq!(w.labels[i], 0);
                }
            }
            prop_assert!(w.mask[k - 1]);
            prop_assert_eq!(w.valid_count(), k.min(end + 1));
        }
    }
}
