//! MetaFormer action predictor with interchangeable token mixers.
//!
//! A window of K (return-to-go, state, action) steps is embedded into a
//! `(3K-1) x d` token grid, passed through N blocks of
//! `LN -> mixer -> residual, LN -> FFN -> residual`, and the rows at state
//! positions are projected to actions.

mod checkpoint;
mod count;
pub mod mixers;
mod network;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, OptimSnapshot};
pub use count::{count_token_mixer_params, BlockParamCount, ParamCounts};
pub use network::{ForwardMode, ForwardPass, Model};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ActionSpace;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("window rejected: {0}")]
    Window(String),
    #[error("parameter mismatch: {0}")]
    Params(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Token mixer used inside one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Conv,
    Attention,
    DirectAttention,
}

/// Mixer choice for the whole stack. `Hybrid` is N-1 conv blocks followed
/// by one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerConfig {
    Conv,
    Attention,
    DirectAttention,
    Hybrid,
}

impl MixerConfig {
    pub fn block_kinds(self, n_blocks: usize) -> Vec<MixerKind> {
        (0..n_blocks)
            .map(|i| match self {
                MixerConfig::Conv => MixerKind::Conv,
                MixerConfig::Attention => MixerKind::Attention,
                MixerConfig::DirectAttention => MixerKind::DirectAttention,
                MixerConfig::Hybrid if i + 1 == n_blocks => MixerKind::Attention,
                MixerConfig::Hybrid => MixerKind::Conv,
            })
            .collect()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MixerConfig::Conv => "conv",
            MixerConfig::Attention => "attention",
            MixerConfig::DirectAttention => "direct_attention",
            MixerConfig::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterInit {
    /// Truncated normal like every other weight.
    Normal,
    /// `w[0] = 1`, other lags 0: each conv mixer starts as the identity.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// K, timesteps per window.
    pub context_len: usize,
    /// d
    pub hidden_dim: usize,
    /// N
    pub n_blocks: usize,
    /// L, taps per convolution filter.
    pub filter_len: usize,
    /// 3 (separate RTG/state/action banks) or 1 (one shared bank).
    pub filter_count: usize,
    pub mixer: MixerConfig,
    /// d', query/key width.
    pub attn_dim: usize,
    /// Divide attention scores by sqrt(d').
    pub attn_scaling: bool,
    /// Learned per-timestep embedding; unset means on for attention-style
    /// mixers and off for pure conv.
    pub positional_embedding: Option<bool>,
    /// Dimension-preserving affine map after each mixer.
    pub projection_layer: bool,
    pub activation: Activation,
    pub include_action_tokens: bool,
    pub dropout: f64,
    pub filter_init: FilterInit,
    pub init_std: f64,
    /// Filled from the dataset when 0.
    pub state_dim: usize,
    /// Filled from the dataset when unset.
    pub action_space: Option<ActionSpace>,
    /// Return-to-go inputs are divided by this; unset means derived from
    /// the dataset's largest absolute episode return.
    pub rtg_scale: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_len: 8,
            hidden_dim: 128,
            n_blocks: 3,
            filter_len: 6,
            filter_count: 3,
            mixer: MixerConfig::Conv,
            attn_dim: 128,
            attn_scaling: false,
            positional_embedding: None,
            projection_layer: false,
            activation: Activation::Gelu,
            include_action_tokens: true,
            dropout: 0.1,
            filter_init: FilterInit::Normal,
            init_std: 0.02,
            state_dim: 0,
            action_space: None,
            rtg_scale: None,
        }
    }
}

impl ModelConfig {
    pub fn block_kinds(&self) -> Vec<MixerKind> {
        self.mixer.block_kinds(self.n_blocks)
    }

    pub fn uses_positional_embedding(&self) -> bool {
        self.positional_embedding
            .unwrap_or(self.mixer != MixerConfig::Conv)
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            context_len: self.context_len,
            include_actions: self.include_action_tokens,
        }
    }

    pub fn action_space(&self) -> Result<ActionSpace, ModelError> {
        self.action_space
            .ok_or_else(|| ModelError::Config("action_space unresolved".into()))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.context_len == 0 || self.hidden_dim == 0 || self.n_blocks == 0 || self.attn_dim == 0 {
            return bad("context_len, hidden_dim, n_blocks and attn_dim must be positive".into());
        }
        if self.filter_len == 0 {
            return bad("filter_len must be at least 1".into());
        }
        if self.filter_count != 1 && self.filter_count != 3 {
            return bad(format!("filter_count must be 1 or 3, got {}", self.filter_count));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive".into());
        }
        if self.state_dim == 0 {
            return bad("state_dim unresolved".into());
        }
        match self.action_space {
            None => return bad("action_space unresolved".into()),
            Some(s) if s.width() == 0 => return bad("action space has zero width".into()),
            _ => {}
        }
        if let Some(s) = self.rtg_scale {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("rtg_scale {s} must be positive"));
            }
        }
        Ok(())
    }
}

/// Which input stream a token position carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modal {
    Rtg,
    State,
    Action,
}

impl Modal {
    pub fn bank(self) -> usize {
        match self {
            Modal::Rtg => 0,
            Modal::State => 1,
            Modal::Action => 2,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Modal::Rtg => "R",
            Modal::State => "s",
            Modal::Action => "a",
        }
    }
}

/// Token ordering `(R_1, s_1, a_1, ..., R_K, s_K)`, or `(R_1, s_1, ...,
/// R_K, s_K)` when actions are excluded. Positions here are 0-based, so
/// 1-based position `p` with `p mod 3 == 1` is an RTG token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub context_len: usize,
    pub include_actions: bool,
}

impl TokenLayout {
    pub fn stride(&self) -> usize {
        if self.include_actions {
            3
        } else {
            2
        }
    }

    pub fn seq_len(&self) -> usize {
        if self.include_actions {
            3 * self.context_len - 1
        } else {
            2 * self.context_len
        }
    }

    pub fn modal(&self, pos: usize) -> Modal {
        match pos % self.stride() {
            0 => Modal::Rtg,
            1 => Modal::State,
            _ => Modal::Action,
        }
    }

    pub fn timestep(&self, pos: usize) -> usize {
        pos / self.stride()
    }

    pub fn position(&self, modal: Modal, timestep: usize) -> usize {
        self.stride() * timestep + modal.bank()
    }

    /// Filter bank index for every position.
    pub fn bank_of(&self, unified: bool) -> Vec<usize> {
        (0..self.seq_len())
            .map(|p| if unified { 0 } else { self.modal(p).bank() })
            .collect()
    }

    /// Labels like `R1, s1, a1, R2, s2` (1-based timesteps).
    pub fn labels(&self) -> Vec<String> {
        (0..self.seq_len())
            .map(|p| format!("{}{}", self.modal(p).symbol(), self.timestep(p) + 1))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trimodal_layout() {
        let l = TokenLayout {
            context_len: 2,
            include_actions: true,
        };
        assert_eq!(l.seq_len(), 5);
        assert_eq!(l.labels(), vec!["R1", "s1", "a1", "R2", "s2"]);
        // 1-based p = 4 has p mod 3 = 1: the RTG bank
        assert_eq!(l.modal(3), Modal::Rtg);
        assert_eq!(l.bank_of(false), vec![0, 1, 2, 0, 1]);
        assert_eq!(l.bank_of(true), vec![0; 5]);
        assert_eq!(l.position(Modal::State, 1), 4);
    }

    #[test]
    fn bimodal_layout() {
        let l = TokenLayout {
            context_len: 3,
            include_actions: false,
        };
        assert_eq!(l.seq_len(), 6);
        assert_eq!(l.labels(), vec!["R1", "s1", "R2", "s2", "R3", "s3"]);
    }

    #[test]
    fn hybrid_is_conv_then_attention() {
        assert_eq!(
            MixerConfig::Hybrid.block_kinds(3),
            vec![MixerKind::Conv, MixerKind::Conv, MixerKind::Attention]
        );
    }

    #[test]
    fn positional_default_depends_on_mixer() {
        let mut c = ModelConfig::default();
        assert!(!c.uses_positional_embedding());
        c.mixer = MixerConfig::DirectAttention;
        assert!(c.uses_positional_embedding());
        c.positional_embedding = Some(false);
        assert!(!c.uses_positional_embedding());
    }
}
