//! Diagnostics on trained models: mixing-matrix maps and their
//! bandedness, modal zero-out, out-of-distribution target sweeps, filter
//! export and ablation-grid bookkeeping.

mod ablation;
mod csv;
mod probes;

pub use ablation::{expand_grid, pivot_csv, runs_csv, AblationAxes, AblationCell, AblationResult, AxisValue};
pub use csv::{attention_map_csv, filters_csv, read_filters_csv, FilterRow};
pub use probes::{
    bandedness_score, extract_attention_maps, modal_zero_out_eval, zero_modal, ood_rtg_sweep, AttentionMaps, SweepRow,
    ZeroOutRow, DEFAULT_BAND, DEFAULT_PROBE_WINDOWS,
};

use thiserror::Error;

use crate::model::{MixerKind, ModelError};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("block {block} uses a {kind:?} mixer, which has no attention weights; export its filters instead")]
    NoAttention { block: usize, kind: MixerKind },
    #[error("map has no mass below the diagonal")]
    ZeroMap,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
