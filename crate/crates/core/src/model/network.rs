use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::mixers::{attention_token_mix, conv_token_mix, direct_attention_mix};
use super::{Activation, FilterInit, MixerKind, Modal, ModelConfig, ModelError, TokenLayout};
use crate::data::PaddedWindow;
use crate::envs::stream_rng;
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const FFN_RATIO: usize = 4;
const INIT_STREAM: u64 = 0;

enum Init {
    Normal,
    Zeros,
    Ones,
    /// Unit weight at lag 0.
    IdentityFilter,
    /// Normal below and on the diagonal, zero above.
    LowerNormal,
}

#[derive(Debug, Clone)]
enum MixerIdx {
    Conv { banks: Vec<usize> },
    Attention { q: usize, k: usize, v: usize },
    Direct { a: usize, v: usize },
}

#[derive(Debug, Clone)]
struct BlockIdx {
    ln1: (usize, usize),
    mixer: MixerIdx,
    proj: Option<(usize, usize)>,
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
struct Index {
    rtg: (usize, usize),
    state: (usize, usize),
    action: Option<(usize, usize)>,
    pos: Option<usize>,
    blocks: Vec<BlockIdx>,
    head: (usize, usize),
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.inits.push(init);
        self.names.len() - 1
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.w"), &[fan_in, fan_out], Init::Normal),
            self.add(format!("{prefix}.b"), &[fan_out], Init::Zeros),
        )
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (
            self.add(format!("{prefix}.gain"), &[d], Init::Ones),
            self.add(format!("{prefix}.bias"), &[d], Init::Zeros),
        )
    }
}

fn plan(c: &ModelConfig) -> Result<(Builder, Index), ModelError> {
    c.validate()?;
    let d = c.hidden_dim;
    let layout = c.layout();
    let n = layout.seq_len();
    let width = c.action_space()?.width();
    let mut b = Builder {
        names: vec![],
        shapes: vec![],
        inits: vec![],
    };
    let rtg = b.dense("embed.rtg", 1, d);
    let state = b.dense("embed.state", c.state_dim, d);
    let action = (c.include_action_tokens).then(|| b.dense("embed.action", width, d));
    let pos = c
        .uses_positional_embedding()
        .then(|| b.add("embed.pos".into(), &[c.context_len, d], Init::Normal));
    let mut blocks = vec![];
    for (i, kind) in c.block_kinds().into_iter().enumerate() {
        let p = format!("blocks.{i}");
        let ln1 = b.norm(&format!("{p}.ln1"), d);
        let mixer = match kind {
            MixerKind::Conv => {
                let init = || match c.filter_init {
                    FilterInit::Normal => Init::Normal,
                    FilterInit::Identity => Init::IdentityFilter,
                };
                let names: &[&str] = if c.filter_count == 1 {
                    &["unified"]
                } else {
                    &["rtg", "state", "action"]
                };
                MixerIdx::Conv {
                    banks: names
                        .iter()
                        .map(|m| b.add(format!("{p}.conv.{m}"), &[d, c.filter_len], init()))
                        .collect(),
                }
            }
            MixerKind::Attention => MixerIdx::Attention {
                q: b.add(format!("{p}.attn.q"), &[d, c.attn_dim], Init::Normal),
                k: b.add(format!("{p}.attn.k"), &[d, c.attn_dim], Init::Normal),
                v: b.add(format!("{p}.attn.v"), &[d, d], Init::Normal),
            },
            MixerKind::DirectAttention => MixerIdx::Direct {
                a: b.add(format!("{p}.direct.a"), &[n, n], Init::LowerNormal),
                v: b.add(format!("{p}.direct.v"), &[d, d], Init::Normal),
            },
        };
        let proj = c.projection_layer.then(|| b.dense(&format!("{p}.proj"), d, d));
        let ln2 = b.norm(&format!("{p}.ln2"), d);
        let fc1 = b.dense(&format!("{p}.ffn.fc1"), d, FFN_RATIO * d);
        let fc2 = b.dense(&format!("{p}.ffn.fc2"), FFN_RATIO * d, d);
        blocks.push(BlockIdx {
            ln1,
            mixer,
            proj,
            ln2,
            fc1,
            fc2,
        });
    }
    let head = b.dense("head", d, width);
    Ok((
        b,
        Index {
            rtg,
            state,
            action,
            pos,
            blocks,
            head,
        },
    ))
}

/// Truncated at two standard deviations.
fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn initialize<R: Rng + ?Sized>(shape: &[usize], init: &Init, std: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    let cols = *shape.last().expect("non-empty shape");
    match init {
        Init::Zeros => {}
        Init::Ones => t.data_mut().iter_mut().for_each(|v| *v = 1.0),
        Init::Normal => t.data_mut().iter_mut().for_each(|v| *v = truncated_normal(rng, std)),
        Init::IdentityFilter => {
            for r in 0..shape[0] {
                t.data_mut()[r * cols] = 1.0;
            }
        }
        Init::LowerNormal => {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if i % cols <= i / cols {
                    *v = truncated_normal(rng, std);
                }
            }
        }
    }
    t
}

/// Train mode draws dropout masks from the given stream; eval is
/// deterministic.
pub enum ForwardMode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Result of a batched forward pass over `B` windows.
pub struct ForwardPass {
    /// `[B*K x action_width]`, row `w*K + t` is the prediction for step `t`
    /// of window `w`.
    pub predictions: Var,
    /// Per block: softmax weights `[B*n x n]` for attention, the raw `[n x
    /// n]` matrix for direct attention, `None` for conv.
    pub mixing: Vec<Option<Var>>,
    pub params: Vec<Var>,
    pub n_windows: usize,
}

/// Parameters plus the resolved configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    index: Index,
}

impl PartialEq for Index {
    fn eq(&self, _: &Self) -> bool {
        // derived entirely from the config
        true
    }
}

impl Model {
    /// Fresh weights: truncated normal (std `init_std`) for matrices,
    /// zero biases, unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let (b, index) = plan(&config)?;
        let mut rng = stream_rng(seed, INIT_STREAM);
        let params = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(s, i)| initialize(s, i, config.init_std, &mut rng))
            .collect();
        Ok(Self {
            config,
            names: b.names,
            params,
            index,
        })
    }

    /// Rebuilds a model from named tensors, which must match the layout the
    /// config implies name for name and shape for shape.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        let (b, index) = plan(&config)?;
        if named.len() != b.names.len() {
            return Err(ModelError::Params(format!(
                "{} tensors given, config implies {}",
                named.len(),
                b.names.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(ModelError::Params(format!(
                    "got {name} {:?}, expected {want} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Params(format!("{name} holds non-finite values")));
            }
            params.push(t);
        }
        Ok(Self {
            config,
            names: b.names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> TokenLayout {
        self.config.layout()
    }

    pub fn block_kinds(&self) -> Vec<MixerKind> {
        self.config.block_kinds()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Filter banks of conv block `block` in `(name, [d x L])` form.
    pub fn conv_filters(&self, block: usize) -> Option<Vec<(&'static str, &Tensor)>> {
        match &self.index.blocks.get(block)?.mixer {
            MixerIdx::Conv { banks } => {
                let names: &[&'static str] = if banks.len() == 1 {
                    &["unified"]
                } else {
                    &["rtg", "state", "action"]
                };
                Some(names.iter().zip(banks).map(|(n, &i)| (*n, &self.params[i])).collect())
            }
            _ => None,
        }
    }

    /// Output width of the action head.
    pub fn action_width(&self) -> usize {
        self.config.action_space.map(|s| s.width()).unwrap_or(0)
    }

    fn check_windows(&self, windows: &[PaddedWindow]) -> Result<(), ModelError> {
        if windows.is_empty() {
            return Err(ModelError::Window("empty batch".into()));
        }
        let (k, sd, aw) = (self.config.context_len, self.config.state_dim, self.action_width());
        for w in windows {
            w.check_len(k).map_err(|e| ModelError::Window(e.to_string()))?;
            if let Some(s) = w.states.iter().find(|s| s.len() != sd) {
                return Err(ModelError::Window(format!("state of dim {} for model dim {sd}", s.len())));
            }
            if let Some(a) = w.actions.iter().find(|a| a.len() != aw) {
                return Err(ModelError::Window(format!("action of width {} for model width {aw}", a.len())));
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn param_vars(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), true)).collect()
    }

    pub fn forward(&self, tape: &mut Tape, windows: &[PaddedWindow], mode: ForwardMode) -> Result<ForwardPass, ModelError> {
        let vars = self.param_vars(tape);
        self.forward_with(tape, &vars, windows, mode)
    }

    /// Forward pass with externally recorded parameters, in `param_names`
    /// order.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        windows: &[PaddedWindow],
        mode: ForwardMode,
    ) -> Result<ForwardPass, ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Params(format!("{} vars for {} params", vars.len(), self.params.len())));
        }
        let mut rng = match mode {
            ForwardMode::Eval => None,
            ForwardMode::Train(r) => Some(r),
        };
        let mut x = self.embed_sequence(tape, vars, windows)?;
        let mut mixing = vec![];
        for i in 0..self.index.blocks.len() {
            let (y, m) = self.block_forward(tape, vars, i, x, rng.as_deref_mut())?;
            x = y;
            mixing.push(m);
        }
        let layout = self.layout();
        let (k, n) = (self.config.context_len, layout.seq_len());
        let rows = (0..windows.len())
            .flat_map(|w| (0..k).map(move |t| w * n + layout.position(Modal::State, t)))
            .collect();
        let h = tape.gather_rows(x, rows)?;
        let (hw, hb) = self.index.head;
        let predictions = tape.affine(h, vars[hw], vars[hb])?;
        Ok(ForwardPass {
            predictions,
            mixing,
            params: vars.to_vec(),
            n_windows: windows.len(),
        })
    }

    /// Embeds and interleaves a batch of windows into a `[B*n x d]` grid.
    pub fn embed_sequence(&self, tape: &mut Tape, vars: &[Var], windows: &[PaddedWindow]) -> Result<Var, ModelError> {
        self.check_windows(windows)?;
        let c = &self.config;
        let (k, bsz) = (c.context_len, windows.len());
        let layout = self.layout();
        let scale = c.rtg_scale.unwrap_or(1.0);

        let rtg = Tensor::new(
            vec![bsz * k, 1],
            windows.iter().flat_map(|w| w.rtgs.iter().map(|r| r / scale)).collect(),
        )?;
        let states = Tensor::new(
            vec![bsz * k, c.state_dim],
            windows.iter().flat_map(|w| w.states.iter().flatten().copied()).collect(),
        )?;
        let rtg = tape.constant(rtg);
        let states = tape.constant(states);
        let er = tape.affine(rtg, vars[self.index.rtg.0], vars[self.index.rtg.1])?;
        let es = tape.affine(states, vars[self.index.state.0], vars[self.index.state.1])?;
        let mut parts = vec![er, es];
        if let (Some((aw, ab)), true) = (self.index.action, k > 1) {
            let width = self.action_width();
            let acts = Tensor::new(
                vec![bsz * (k - 1), width],
                windows
                    .iter()
                    .flat_map(|w| w.actions[..k - 1].iter().flatten().copied())
                    .collect(),
            )?;
            let acts = tape.constant(acts);
            parts.push(tape.affine(acts, vars[aw], vars[ab])?);
        }
        let all = tape.concat_rows(&parts)?;

        let n = layout.seq_len();
        let mut perm = Vec::with_capacity(bsz * n);
        for w in 0..bsz {
            for p in 0..n {
                let t = layout.timestep(p);
                perm.push(match layout.modal(p) {
                    Modal::Rtg => w * k + t,
                    Modal::State => bsz * k + w * k + t,
                    Modal::Action => 2 * bsz * k + w * (k - 1) + t,
                });
            }
        }
        let mut x = tape.gather_rows(all, perm)?;
        if let Some(pi) = self.index.pos {
            let steps = (0..bsz).flat_map(|_| (0..n).map(|p| layout.timestep(p))).collect();
            let pe = tape.gather_rows(vars[pi], steps)?;
            x = tape.add(x, pe)?;
        }
        Ok(x)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut (dyn RngCore + '_)>) -> Result<Var, ModelError> {
        let p = self.config.dropout;
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..tape.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(tape.mul_const(x, mask)?)
    }

    /// One MetaFormer block. Returns the new grid and the block's mixing
    /// weights when it has any.
    pub fn block_forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        block: usize,
        x: Var,
        mut rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Result<(Var, Option<Var>), ModelError> {
        let b = &self.index.blocks[block];
        let n = self.layout().seq_len();
        let h = tape.layer_norm(x, vars[b.ln1.0], vars[b.ln1.1], LN_EPS)?;
        let (mut m, mixing) = match &b.mixer {
            MixerIdx::Conv { banks } => {
                let banks: Vec<Var> = banks.iter().map(|&i| vars[i]).collect();
                (conv_token_mix(tape, h, &banks, &self.layout())?, None)
            }
            MixerIdx::Attention { q, k, v } => {
                let scale = if self.config.attn_scaling {
                    1.0 / (self.config.attn_dim as f64).sqrt()
                } else {
                    1.0
                };
                let (z, alpha) = attention_token_mix(tape, h, vars[*q], vars[*k], vars[*v], n, scale)?;
                (z, Some(alpha))
            }
            MixerIdx::Direct { a, v } => (direct_attention_mix(tape, h, vars[*a], vars[*v], n)?, Some(vars[*a])),
        };
        if let Some((pw, pb)) = b.proj {
            m = tape.affine(m, vars[pw], vars[pb])?;
        }
        let m = self.dropout(tape, m, rng.as_deref_mut())?;
        let z1 = tape.add(x, m)?;

        let h = tape.layer_norm(z1, vars[b.ln2.0], vars[b.ln2.1], LN_EPS)?;
        let h = tape.affine(h, vars[b.fc1.0], vars[b.fc1.1])?;
        let h = match self.config.activation {
            Activation::Gelu => tape.gelu(h),
            Activation::Relu => tape.relu(h),
        };
        let h = tape.affine(h, vars[b.fc2.0], vars[b.fc2.1])?;
        let h = self.dropout(tape, h, rng)?;
        Ok((tape.add(z1, h)?, mixing))
    }

    /// Eval-mode predictions `[B*K x width]` without gradient bookkeeping.
    pub fn predict(&self, windows: &[PaddedWindow]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let pass = self.forward_with(&mut tape, &vars, windows, ForwardMode::Eval)?;
        Ok(tape.value(pass.predictions).clone())
    }
}
