//! Config-driven commands: dataset generation, training, evaluation,
//! analysis and ablation grids. Each command writes its artifacts and a
//! `resolved_config.toml` snapshot into one output directory.

mod commands;
mod config;

pub use commands::{
    ablate, analyze, eval, gen_data, train, AblateReport, AnalyzeReport, EvalRow, GenReport, TrainReport,
    CONFIG_SNAPSHOT,
};
pub use config::{
    eval_seed, load_config, parse_config, probe_seed, resolve_model, AblationConfig, AnalysisConfig, DatasetConfig,
    PolicyWeight, RunConfig,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::data::DataError;
use crate::envs::EnvError;
use crate::model::{CheckpointError, ModelError};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{what} not found: {}", path.display())]
    Missing { what: &'static str, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl PipelineError {
    /// 2 for configuration problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Train(TrainError::Config(_))
            | PipelineError::Model(ModelError::Config(_))
            | PipelineError::Env(EnvError::Invalid(_) | EnvError::Policy(_))
            | PipelineError::Analysis(AnalysisError::NoAttention { .. }) => 2,
            PipelineError::Numeric(_) => 3,
            _ => 1,
        }
    }
}
