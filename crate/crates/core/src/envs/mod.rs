//! Seedable synthetic MDPs and graded behavior policies.
//!
//! * `point_reach`: dense-reward continuous control in the plane.
//! * `grid_goal`: sparse-reward goal reaching on a walled grid.
//! * `delay_chain`: binary choices whose reward only arrives at the end.

mod generate;
mod policy;
mod spec;

pub use generate::{generate_dataset, rollout};
pub use policy::BehaviorPolicy;
pub use spec::{EnvName, EnvSpec, EnvState, RewardStructure, StepOutcome};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("action {action:?} does not fit the {env} action space")]
    BadAction { env: &'static str, action: crate::data::Action },
    #[error("episode already finished")]
    Finished,
    #[error("invalid environment spec: {0}")]
    Invalid(String),
    #[error("invalid behavior policy: {0}")]
    Policy(String),
}

/// Independent, reproducible random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
