//! Offline trajectories: return-to-go relabeling, state normalization,
//! K-step window sampling and the line-oriented dataset file.

mod dataset;
mod format;
mod trajectory;
mod window;

pub use dataset::{Dataset, DatasetMeta, NormStats, ReturnStats, STD_FLOOR};
pub use format::{read_dataset, write_dataset, FORMAT_VERSION};
pub use trajectory::{compute_rtg, Action, ActionSpace, Trajectory};
pub use window::{sample_subtrajectory, PaddedWindow};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty reward sequence")]
    EmptyRewards,
    #[error("non-finite reward at index {0}")]
    NonFiniteReward(usize),
    #[error("trajectory lengths disagree: {states} states, {actions} actions, {rewards} rewards")]
    LengthMismatch {
        states: usize,
        actions: usize,
        rewards: usize,
    },
    #[error("action {index} does not fit action space {space:?}")]
    BadAction { index: usize, space: ActionSpace },
    #[error("state {index} has dimension {got}, expected {expected}")]
    BadStateDim {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("dataset has no trajectories")]
    EmptyDataset,
    #[error("window length {got} does not match context length {expected}")]
    WindowLength { got: usize, expected: usize },
    #[error("{path}: line {line} (byte offset {offset}): {msg}")]
    Format {
        path: String,
        line: usize,
        offset: u64,
        msg: String,
    },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
