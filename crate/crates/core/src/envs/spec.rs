use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::data::{Action, ActionSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    PointReach,
    GridGoal,
    DelayChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardStructure {
    Dense,
    Sparse,
    Delayed,
}

/// Environment definition. Fields that do not apply to `name` are ignored;
/// omitted fields take the per-environment defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawEnvSpec")]
pub struct EnvSpec {
    pub name: EnvName,
    pub horizon: usize,
    /// Recorded for completeness; return-to-go labels are undiscounted.
    pub gamma: f64,
    /// point_reach: std of additive position noise. grid_goal: slip
    /// probability. delay_chain: unused.
    pub noise: f64,
    pub seed: u64,
    /// point_reach: goal tolerance radius.
    pub goal_radius: f64,
    /// grid_goal: side length of the square grid.
    pub grid_size: usize,
    /// grid_goal: blocked cells as `[x, y]`.
    pub walls: Vec<[usize; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvSpec {
    name: EnvName,
    horizon: Option<usize>,
    gamma: Option<f64>,
    noise: Option<f64>,
    seed: Option<u64>,
    goal_radius: Option<f64>,
    grid_size: Option<usize>,
    walls: Option<Vec<[usize; 2]>>,
}

impl From<RawEnvSpec> for EnvSpec {
    fn from(raw: RawEnvSpec) -> Self {
        let base = EnvSpec::for_name(raw.name);
        EnvSpec {
            name: raw.name,
            horizon: raw.horizon.unwrap_or(base.horizon),
            gamma: raw.gamma.unwrap_or(base.gamma),
            noise: raw.noise.unwrap_or(base.noise),
            seed: raw.seed.unwrap_or(base.seed),
            goal_radius: raw.goal_radius.unwrap_or(base.goal_radius),
            grid_size: raw.grid_size.unwrap_or(base.grid_size),
            walls: raw.walls.unwrap_or(base.walls),
        }
    }
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self::point_reach()
    }
}

pub const POINT_STEP: f64 = 0.1;

impl EnvSpec {
    pub fn for_name(name: EnvName) -> Self {
        match name {
            EnvName::PointReach => Self::point_reach(),
            EnvName::GridGoal => Self::grid_goal(),
            EnvName::DelayChain => Self::delay_chain(),
        }
    }

    pub fn point_reach() -> Self {
        Self {
            name: EnvName::PointReach,
            horizon: 50,
            gamma: 0.99,
            noise: 0.0,
            seed: 0,
            goal_radius: 0.05,
            grid_size: 7,
            walls: default_walls(),
        }
    }

    pub fn grid_goal() -> Self {
        Self {
            name: EnvName::GridGoal,
            horizon: 30,
            ..Self::point_reach()
        }
    }

    pub fn delay_chain() -> Self {
        Self {
            name: EnvName::DelayChain,
            horizon: 10,
            ..Self::point_reach()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.horizon == 0 {
            return Err(EnvError::Invalid("horizon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(EnvError::Invalid(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(EnvError::Invalid(format!("noise {} must be non-negative", self.noise)));
        }
        if self.name == EnvName::GridGoal {
            if self.grid_size < 2 {
                return Err(EnvError::Invalid("grid_size must be at least 2".into()));
            }
            if self.noise > 1.0 {
                return Err(EnvError::Invalid("grid_goal slip probability exceeds 1".into()));
            }
            if let Some(w) = self.walls.iter().find(|w| w[0] >= self.grid_size || w[1] >= self.grid_size) {
                return Err(EnvError::Invalid(format!("wall {w:?} outside the grid")));
            }
            if self.free_cells().len() < 2 {
                return Err(EnvError::Invalid("grid needs at least two free cells".into()));
            }
        }
        Ok(())
    }

    pub fn reward_structure(&self) -> RewardStructure {
        match self.name {
            EnvName::PointReach => RewardStructure::Dense,
            EnvName::GridGoal => RewardStructure::Sparse,
            EnvName::DelayChain => RewardStructure::Delayed,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.name {
            EnvName::PointReach | EnvName::GridGoal => 4,
            EnvName::DelayChain => 2,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.name {
            EnvName::PointReach => ActionSpace::Continuous { dim: 2 },
            EnvName::GridGoal => ActionSpace::Discrete { n: 4 },
            EnvName::DelayChain => ActionSpace::Discrete { n: 2 },
        }
    }

    fn label(&self) -> &'static str {
        match self.name {
            EnvName::PointReach => "point_reach",
            EnvName::GridGoal => "grid_goal",
            EnvName::DelayChain => "delay_chain",
        }
    }

    pub(crate) fn is_wall(&self, x: usize, y: usize) -> bool {
        self.walls.iter().any(|w| w[0] == x && w[1] == y)
    }

    pub(crate) fn free_cells(&self) -> Vec<(usize, usize)> {
        let n = self.grid_size;
        (0..n)
            .flat_map(|y| (0..n).map(move |x| (x, y)))
            .filter(|&(x, y)| !self.is_wall(x, y))
            .collect()
    }

    /// Grid move for action 0..4 (up, down, left, right); blocked moves stay.
    pub(crate) fn grid_move(&self, pos: (usize, usize), action: usize) -> (usize, usize) {
        let (x, y) = (pos.0 as isize, pos.1 as isize);
        let (nx, ny) = match action {
            0 => (x, y + 1),
            1 => (x, y - 1),
            2 => (x - 1, y),
            _ => (x + 1, y),
        };
        let n = self.grid_size as isize;
        if nx < 0 || ny < 0 || nx >= n || ny >= n || self.is_wall(nx as usize, ny as usize) {
            pos
        } else {
            (nx as usize, ny as usize)
        }
    }

    /// Breadth-first distances to `goal` over free cells (`usize::MAX` if
    /// unreachable), indexed `y * n + x`.
    pub(crate) fn grid_distances(&self, goal: (usize, usize)) -> Vec<usize> {
        let n = self.grid_size;
        let mut dist = vec![usize::MAX; n * n];
        dist[goal.1 * n + goal.0] = 0;
        let mut queue = VecDeque::from([goal]);
        while let Some(p) = queue.pop_front() {
            let dp = dist[p.1 * n + p.0];
            for a in 0..4 {
                // moves are symmetric, so neighbors of p reach p in one step
                let q = self.grid_move(p, a);
                if q != p && dist[q.1 * n + q.0] == usize::MAX {
                    dist[q.1 * n + q.0] = dp + 1;
                    queue.push_back(q);
                }
            }
        }
        dist
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let kind = match self.name {
            EnvName::PointReach => {
                let mut p = || [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let pos = p();
                let goal = p();
                StateKind::Point { pos, goal }
            }
            EnvName::GridGoal => {
                let cells = self.free_cells();
                let goal_idx = rng.gen_range(0..cells.len());
                let mut start_idx = rng.gen_range(0..cells.len() - 1);
                if start_idx >= goal_idx {
                    start_idx += 1;
                }
                StateKind::Grid {
                    pos: cells[start_idx],
                    goal: cells[goal_idx],
                }
            }
            EnvName::DelayChain => StateKind::Chain {
                pattern: (0..self.horizon).map(|_| rng.gen_bool(0.5)).collect(),
                matches: 0,
            },
        };
        EnvState {
            kind,
            t: 0,
            done: self.horizon == 0,
        }
    }

    pub fn observe(&self, state: &EnvState) -> Vec<f64> {
        match &state.kind {
            StateKind::Point { pos, goal } => vec![pos[0], pos[1], goal[0], goal[1]],
            StateKind::Grid { pos, goal } => {
                let s = (self.grid_size - 1) as f64;
                vec![pos.0 as f64 / s, pos.1 as f64 / s, goal.0 as f64 / s, goal.1 as f64 / s]
            }
            StateKind::Chain { pattern, .. } => {
                let h = self.horizon.max(1) as f64;
                let bit = match pattern.get(state.t) {
                    Some(true) => 1.0,
                    Some(false) => -1.0,
                    None => 0.0,
                };
                vec![state.t as f64 / h, bit]
            }
        }
    }

    /// One transition. Continuous actions are clipped to `[-1, 1]`.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &EnvState,
        action: &Action,
        rng: &mut R,
    ) -> Result<StepOutcome, EnvError> {
        if state.done {
            return Err(EnvError::Finished);
        }
        if !self.action_space().accepts(action) {
            return Err(EnvError::BadAction {
                env: self.label(),
                action: action.clone(),
            });
        }
        let t = state.t + 1;
        let at_horizon = t >= self.horizon;
        let (kind, reward, done) = match (&state.kind, action) {
            (StateKind::Point { pos, goal }, Action::Continuous(a)) => {
                let mut next = *pos;
                for i in 0..2 {
                    next[i] += POINT_STEP * a[i].clamp(-1.0, 1.0);
                    if self.noise > 0.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        next[i] += self.noise * z;
                    }
                }
                let dist = ((next[0] - goal[0]).powi(2) + (next[1] - goal[1]).powi(2)).sqrt();
                (
                    StateKind::Point { pos: next, goal: *goal },
                    -dist,
                    at_horizon || dist < self.goal_radius,
                )
            }
            (StateKind::Grid { pos, goal }, Action::Discrete(a)) => {
                let a = if self.noise > 0.0 && rng.gen_bool(self.noise) {
                    rng.gen_range(0..4)
                } else {
                    *a
                };
                let next = self.grid_move(*pos, a);
                let hit = next == *goal;
                (
                    StateKind::Grid { pos: next, goal: *goal },
                    if hit { 1.0 } else { 0.0 },
                    hit || at_horizon,
                )
            }
            (StateKind::Chain { pattern, matches }, Action::Discrete(a)) => {
                let matched = pattern[state.t] == (*a == 1);
                let matches = matches + usize::from(matched);
                let reward = if at_horizon { matches as f64 } else { 0.0 };
                (
                    StateKind::Chain {
                        pattern: pattern.clone(),
                        matches,
                    },
                    reward,
                    at_horizon,
                )
            }
            _ => unreachable!("action space checked above"),
        };
        Ok(StepOutcome {
            next: EnvState { kind, t, done },
            reward,
            done,
        })
    }
}

/// Default grid_goal walls: a vertical barrier at x = 3 with gaps at the
/// top and bottom rows.
fn default_walls() -> Vec<[usize; 2]> {
    (1..5).map(|y| [3, y]).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum StateKind {
    Point { pos: [f64; 2], goal: [f64; 2] },
    Grid { pos: (usize, usize), goal: (usize, usize) },
    Chain { pattern: Vec<bool>, matches: usize },
}

/// Full (hidden plus observable) environment state.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub(crate) kind: StateKind,
    pub t: usize,
    pub done: bool,
}

impl EnvState {
    /// point_reach distance to goal; `None` for other environments.
    pub fn goal_distance(&self) -> Option<f64> {
        match &self.kind {
            StateKind::Point { pos, goal } => {
                Some(((pos[0] - goal[0]).powi(2) + (pos[1] - goal[1]).powi(2)).sqrt())
            }
            _ => None,
        }
    }

    pub fn point(pos: [f64; 2], goal: [f64; 2]) -> Self {
        Self {
            kind: StateKind::Point { pos, goal },
            t: 0,
            done: false,
        }
    }

    pub fn grid(pos: (usize, usize), goal: (usize, usize)) -> Self {
        Self {
            kind: StateKind::Grid { pos, goal },
            t: 0,
            done: false,
        }
    }

    pub fn chain(pattern: Vec<bool>) -> Self {
        Self {
            kind: StateKind::Chain { pattern, matches: 0 },
            t: 0,
            done: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
}
