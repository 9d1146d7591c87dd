use serde::Serialize;

use super::network::FFN_RATIO;
use super::{MixerKind, ModelConfig, ModelError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockParamCount {
    pub kind: MixerKind,
    /// Token-mixer weights, including the optional projection layer.
    pub mixer: usize,
    /// Everything in the block: mixer, both norms and the FFN.
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub blocks: Vec<BlockParamCount>,
    pub mixer_total: usize,
    pub embedding: usize,
    pub head: usize,
    pub total: usize,
}

/// Closed-form parameter counts.
///
/// * conv: `filter_count * d * L`
/// * attention: `2 d d' + d^2`
/// * direct attention: `n^2 + d^2` (A is stored square; its upper
///   triangle is inert)
/// * projection layer: `d^2 + d` on top of any of these
pub fn count_token_mixer_params(c: &ModelConfig) -> Result<ParamCounts, ModelError> {
    c.validate()?;
    let d = c.hidden_dim;
    let n = c.layout().seq_len();
    let width = c.action_space()?.width();
    let blocks: Vec<BlockParamCount> = c
        .block_kinds()
        .into_iter()
        .map(|kind| {
            let mut mixer = match kind {
                MixerKind::Conv => c.filter_count * d * c.filter_len,
                MixerKind::Attention => 2 * d * c.attn_dim + d * d,
                MixerKind::DirectAttention => n * n + d * d,
            };
            if c.projection_layer {
                mixer += d * d + d;
            }
            let norms = 2 * 2 * d;
            let ffn = d * FFN_RATIO * d + FFN_RATIO * d + FFN_RATIO * d * d + d;
            BlockParamCount {
                kind,
                mixer,
                block: mixer + norms + ffn,
            }
        })
        .collect();
    let mut embedding = (d + d) + (c.state_dim * d + d);
    if c.include_action_tokens {
        embedding += width * d + d;
    }
    if c.uses_positional_embedding() {
        embedding += c.context_len * d;
    }
    let head = d * width + width;
    let mixer_total = blocks.iter().map(|b| b.mixer).sum();
    let total = embedding + head + blocks.iter().map(|b| b.block).sum::<usize>();
    Ok(ParamCounts {
        blocks,
        mixer_total,
        embedding,
        head,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ActionSpace;
    use crate::model::{MixerConfig, Model};

    fn base() -> ModelConfig {
        ModelConfig {
            state_dim: 4,
            action_space: Some(ActionSpace::Continuous { dim: 2 }),
            ..ModelConfig::default()
        }
    }

    fn measured_mixer(m: &Model, block: usize) -> usize {
        let prefix = format!("blocks.{block}.");
        m.param_names()
            .iter()
            .zip(m.params())
            .filter(|(n, _)| {
                n.starts_with(&prefix)
                    && [".conv.", ".attn.", ".direct.", ".proj."].iter().any(|s| n.contains(s))
            })
            .map(|(_, t)| t.len())
            .sum()
    }

    #[test]
    fn unified_filter_single_dim() {
        let c = ModelConfig {
            hidden_dim: 1,
            n_blocks: 1,
            filter_count: 1,
            ..base()
        };
        assert_eq!(count_token_mixer_params(&c).unwrap().mixer_total, 6);
    }

    #[test]
    fn formulas_match_enumerated_tensors() {
        for mixer in [
            MixerConfig::Conv,
            MixerConfig::Attention,
            MixerConfig::DirectAttention,
            MixerConfig::Hybrid,
        ] {
            for proj in [false, true] {
                for actions in [false, true] {
                    let c = ModelConfig {
                        hidden_dim: 8,
                        attn_dim: 5,
                        n_blocks: 2,
                        mixer,
                        projection_layer: proj,
                        include_action_tokens: actions,
                        ..base()
                    };
                    let counts = count_token_mixer_params(&c).unwrap();
                    let m = Model::new(c, 0).unwrap();
                    assert_eq!(counts.total, m.param_count(), "{mixer:?} proj={proj}");
                    for (i, b) in counts.blocks.iter().enumerate() {
                        assert_eq!(b.mixer, measured_mixer(&m, i));
                    }
                }
            }
        }
    }
}
