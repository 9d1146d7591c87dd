use super::AnalysisError;
use crate::data::{sample_subtrajectory, Dataset, PaddedWindow};
use crate::envs::stream_rng;
use crate::model::{ForwardMode, MixerKind, Modal, Model};
use crate::tensor::{Tape, Tensor, Var};
use crate::train::{evaluate, target_for_multiple, EvalRequest};

/// One full timestep back from the current token at L = 6.
pub const DEFAULT_BAND: usize = 6;
pub const DEFAULT_PROBE_WINDOWS: usize = 256;
const PROBE_STREAM: u64 = 1 << 48;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    /// `(block index, n x n map)` for each probed block.
    pub layers: Vec<(usize, Tensor)>,
    /// Elementwise mean of the per-block maps.
    pub mean: Tensor,
    pub labels: Vec<String>,
}

/// Averages each probed block's mixing matrix over `n_probe` windows
/// sampled from `dataset` (which must be normalized like the training
/// data). Softmax rows are averaged over the windows where that row's
/// timestep is valid; direct-attention maps are the masked learned matrix.
/// `layers = None` probes every non-conv block.
pub fn extract_attention_maps(
    model: &Model,
    dataset: &Dataset,
    layers: Option<&[usize]>,
    n_probe: usize,
    seed: u64,
) -> Result<AttentionMaps, AnalysisError> {
    let kinds = model.block_kinds();
    let probed: Vec<usize> = match layers {
        Some(ls) => {
            for &b in ls {
                match kinds.get(b) {
                    None => return Err(AnalysisError::Invalid(format!("no block {b}; model has {}", kinds.len()))),
                    Some(MixerKind::Conv) => {
                        return Err(AnalysisError::NoAttention {
                            block: b,
                            kind: MixerKind::Conv,
                        })
                    }
                    _ => {}
                }
            }
            ls.to_vec()
        }
        None => (0..kinds.len()).filter(|&b| kinds[b] != MixerKind::Conv).collect(),
    };
    if probed.is_empty() {
        return Err(AnalysisError::NoAttention {
            block: 0,
            kind: MixerKind::Conv,
        });
    }
    if n_probe == 0 || dataset.is_empty() {
        return Err(AnalysisError::Invalid("need at least one probe window".into()));
    }
    let k = model.config().context_len;
    let layout = model.layout();
    let n = layout.seq_len();
    let mut rng = stream_rng(seed, PROBE_STREAM);
    let windows: Vec<PaddedWindow> = (0..n_probe).map(|_| sample_subtrajectory(dataset, k, &mut rng)).collect();
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &windows, ForwardMode::Eval)?;

    let mut maps = vec![];
    for &b in &probed {
        let var: Var = pass.mixing[b].expect("non-conv blocks expose mixing weights");
        let w = tape.value(var);
        let mut map = Tensor::zeros(&[n, n]);
        if kinds[b] == MixerKind::DirectAttention {
            for i in 0..n {
                for j in 0..=i {
                    map.data_mut()[i * n + j] = w.at(i, j);
                }
            }
        } else {
            let mut counts = vec![0usize; n];
            for (wi, win) in windows.iter().enumerate() {
                for i in 0..n {
                    if !win.mask[layout.timestep(i)] {
                        continue;
                    }
                    counts[i] += 1;
                    for j in 0..=i {
                        map.data_mut()[i * n + j] += w.at(wi * n + i, j);
                    }
                }
            }
            for (i, &c) in counts.iter().enumerate() {
                if c > 0 {
                    for j in 0..=i {
                        map.data_mut()[i * n + j] /= c as f64;
                    }
                }
            }
        }
        maps.push((b, map));
    }
    let mut mean = Tensor::zeros(&[n, n]);
    for (_, m) in &maps {
        for (a, v) in mean.data_mut().iter_mut().zip(m.data()) {
            *a += v / maps.len() as f64;
        }
    }
    Ok(AttentionMaps {
        layers: maps,
        mean,
        labels: layout.labels(),
    })
}

/// Mean over rows of the share of a row's absolute lower-triangular mass
/// lying within `b` positions of the diagonal. Rows without mass are
/// skipped.
pub fn bandedness_score(map: &Tensor, b: usize) -> Result<f64, AnalysisError> {
    if b == 0 {
        return Err(AnalysisError::Invalid("band must be at least 1".into()));
    }
    let n = map.rows();
    if map.shape().len() != 2 || map.cols() != n {
        return Err(AnalysisError::Invalid(format!("map shape {:?} is not square", map.shape())));
    }
    let (mut total, mut rows) = (0.0, 0usize);
    for i in 0..n {
        let row = &map.row(i)[..=i];
        let mass: f64 = row.iter().map(|v| v.abs()).sum();
        if mass == 0.0 {
            continue;
        }
        let near: f64 = row[(i + 1).saturating_sub(b)..].iter().map(|v| v.abs()).sum();
        total += near / mass;
        rows += 1;
    }
    if rows == 0 {
        return Err(AnalysisError::ZeroMap);
    }
    Ok(total / rows as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroOutRow {
    /// `None` is the intact baseline.
    pub modal: Option<Modal>,
    pub intact_mean: f64,
    pub zeroed_mean: f64,
    /// `(zeroed - F) / (intact - F)` with `F = min(0, floor)`; NaN when the
    /// intact return sits at `F`.
    pub ratio: f64,
}

/// Zeroes one input stream in every evaluation window before embedding.
/// The current state stays intact when states are zeroed.
pub fn zero_modal(w: &mut PaddedWindow, modal: Modal) {
    let k = w.context_len();
    match modal {
        Modal::Rtg => w.rtgs.iter_mut().for_each(|r| *r = 0.0),
        Modal::State => {
            for s in w.states.iter_mut().take(k - 1) {
                s.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Modal::Action => {
            for a in w.actions.iter_mut() {
                a.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Return under each zeroed modal relative to the intact model. `floor` is
/// the dataset's minimum return; ratios are measured from `min(0, floor)`
/// so that all-negative returns still read "1 = unaffected, lower = worse".
pub fn modal_zero_out_eval(
    model: &Model,
    base: &EvalRequest,
    modals: &[Option<Modal>],
    floor: f64,
) -> Result<Vec<ZeroOutRow>, AnalysisError> {
    let f = floor.min(0.0);
    let intact = evaluate(
        model,
        &EvalRequest {
            transform: None,
            ..*base
        },
    )?
    .mean;
    let mut rows = vec![];
    for &modal in modals {
        let zeroed = match modal {
            None => intact,
            Some(m) => {
                let t = move |w: &mut PaddedWindow| zero_modal(w, m);
                evaluate(
                    model,
                    &EvalRequest {
                        transform: Some(&t),
                        ..*base
                    },
                )?
                .mean
            }
        };
        let denom = intact - f;
        rows.push(ZeroOutRow {
            modal,
            intact_mean: intact,
            zeroed_mean: zeroed,
            // undefined when the intact model does no better than the floor
            ratio: if denom == 0.0 { f64::NAN } else { (zeroed - f) / denom },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub multiple: f64,
    pub target: f64,
    pub mean: f64,
    pub std: f64,
}

/// Evaluates at each multiple of the dataset's best return.
pub fn ood_rtg_sweep(
    model: &Model,
    base: &EvalRequest,
    multiples: &[f64],
    max_return: f64,
    min_return: f64,
) -> Result<Vec<SweepRow>, AnalysisError> {
    multiples
        .iter()
        .map(|&m| {
            let target = target_for_multiple(m, max_return, min_return);
            let res = evaluate(model, &EvalRequest { target, ..*base })?;
            Ok(SweepRow {
                multiple: m,
                target,
                mean: res.mean,
                std: res.std,
            })
        })
        .collect()
}
