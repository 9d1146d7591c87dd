use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::analysis::{AblationAxes, DEFAULT_BAND, DEFAULT_PROBE_WINDOWS};
use crate::data::Dataset;
use crate::envs::{stream_rng, BehaviorPolicy, EnvSpec};
use crate::model::ModelConfig;
use crate::train::{EvalConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyWeight {
    pub policy: BehaviorPolicy,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub episodes: usize,
    pub mix: Vec<PolicyWeight>,
    /// Defaults to `dataset.jsonl` in the output directory.
    pub path: Option<PathBuf>,
    /// Defaults to a value derived from the run seed.
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            mix: vec![PolicyWeight {
                policy: BehaviorPolicy::Expert,
                weight: 1.0,
            }],
            path: None,
            seed: None,
        }
    }
}

impl DatasetConfig {
    pub fn mixture(&self) -> Vec<(BehaviorPolicy, f64)> {
        self.mix.iter().map(|p| (p.policy.clone(), p.weight)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub probe_windows: usize,
    pub band: usize,
    /// Blocks to probe; unset probes every non-conv block.
    pub layers: Option<Vec<usize>>,
    /// Target for the zero-out runs, as a multiple of the best return.
    pub target_multiple: f64,
    pub sweep_multiples: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            probe_windows: DEFAULT_PROBE_WINDOWS,
            band: DEFAULT_BAND,
            layers: None,
            target_multiple: 1.0,
            sweep_multiples: (1..=20).map(f64::from).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Cells are scored by mean return at this multiple of the best return.
    pub target_multiple: f64,
    /// Column axis of the summary table; defaults to the last swept axis.
    pub pivot: Option<String>,
    pub axes: AblationAxes,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            target_multiple: 1.0,
            pivot: None,
            axes: AblationAxes::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub env: EnvSpec,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            env: EnvSpec::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

const DATASET_SEED_STREAM: u64 = (1 << 56) + 1;
const EVAL_SEED_STREAM: u64 = (1 << 56) + 2;
const PROBE_SEED_STREAM: u64 = (1 << 56) + 3;

/// 63 bits, so the value survives a TOML (signed 64-bit) snapshot.
fn derive(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).next_u64() >> 1
}

/// Seed for evaluation episodes under run seed `seed`.
pub fn eval_seed(seed: u64) -> u64 {
    derive(seed, EVAL_SEED_STREAM)
}

pub fn probe_seed(seed: u64) -> u64 {
    derive(seed, PROBE_SEED_STREAM)
}

/// Parses TOML, rejecting unknown keys with their full path.
pub fn parse_config(text: &str) -> Result<RunConfig, PipelineError> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        if path.is_empty() || path == "." {
            PipelineError::Config(msg)
        } else {
            PipelineError::Config(format!("{path}: {msg}"))
        }
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_config(&text).map_err(|e| match e {
        PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

impl RunConfig {
    /// Fills the output-dependent and seed-dependent defaults.
    pub fn resolve(&self, out: &Path) -> RunConfig {
        let mut c = self.clone();
        c.out = Some(out.to_path_buf());
        c.dataset.path.get_or_insert_with(|| out.join("dataset.jsonl"));
        c.dataset.seed.get_or_insert_with(|| derive(self.seed, DATASET_SEED_STREAM));
        c
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .path
            .clone()
            .unwrap_or_else(|| self.out.clone().unwrap_or_default().join("dataset.jsonl"))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.env.validate().map_err(|e| PipelineError::Config(format!("env: {e}")))?;
        if self.dataset.episodes == 0 {
            return Err(PipelineError::Config("dataset.episodes must be at least 1".into()));
        }
        if self.dataset.mix.is_empty() {
            return Err(PipelineError::Config("dataset.mix must list at least one policy".into()));
        }
        self.train.validate().map_err(|e| PipelineError::Config(format!("train: {e}")))?;
        self.eval.validate().map_err(|e| PipelineError::Config(format!("eval: {e}")))?;
        if self.analysis.band == 0 || self.analysis.probe_windows == 0 {
            return Err(PipelineError::Config("analysis.band and analysis.probe_windows must be positive".into()));
        }
        if self.ablation.seeds.is_empty() {
            return Err(PipelineError::Config("ablation.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Snapshot text written beside every command's outputs.
    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Config(format!("cannot snapshot config: {e}")))
    }
}

/// Fills the dataset-dependent model fields and checks explicit ones.
pub fn resolve_model(cfg: &ModelConfig, ds: &Dataset) -> Result<ModelConfig, PipelineError> {
    let mut c = cfg.clone();
    if c.state_dim == 0 {
        c.state_dim = ds.meta.state_dim;
    } else if c.state_dim != ds.meta.state_dim {
        return Err(PipelineError::Config(format!(
            "model.state_dim {} conflicts with the dataset's {}",
            c.state_dim, ds.meta.state_dim
        )));
    }
    match c.action_space {
        None => c.action_space = Some(ds.meta.action_space),
        Some(s) if s != ds.meta.action_space => {
            return Err(PipelineError::Config(format!(
                "model.action_space {s:?} conflicts with the dataset's {:?}",
                ds.meta.action_space
            )))
        }
        _ => {}
    }
    if c.rtg_scale.is_none() {
        let r = ds.return_stats();
        let scale = r.max.abs().max(r.min.abs());
        c.rtg_scale = Some(if scale > 0.0 { scale } else { 1.0 });
    }
    c.positional_embedding = Some(c.uses_positional_embedding());
    c.validate().map_err(|e| PipelineError::Config(format!("model: {e}")))?;
    Ok(c)
}
