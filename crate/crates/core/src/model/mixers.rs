//! Token mixers over a stack of windows (`[B*n x d]`, `n` rows per window).

use super::TokenLayout;
use crate::tensor::{Tape, TensorError, Var};

/// Depthwise causal convolution. `banks` holds one `[d x L]` bank (unified
/// filter) or three (RTG, state, action), picked per position by modality.
pub fn conv_token_mix(tape: &mut Tape, x: Var, banks: &[Var], layout: &TokenLayout) -> Result<Var, TensorError> {
    let unified = match banks.len() {
        1 => true,
        3 => false,
        n => {
            return Err(TensorError::InvalidArgument {
                op: "conv_token_mix",
                msg: format!("expected 1 or 3 filter banks, got {n}"),
            })
        }
    };
    tape.conv_mix(x, banks, &layout.bank_of(unified))
}

/// Single-head causal attention `z_i = sum_{j<=i} alpha_ij v_j`. Returns
/// the mixed rows and the `[B*n x n]` attention weights.
pub fn attention_token_mix(
    tape: &mut Tape,
    x: Var,
    q: Var,
    k: Var,
    v: Var,
    n: usize,
    scale: f64,
) -> Result<(Var, Var), TensorError> {
    let qx = tape.matmul(x, q)?;
    let kx = tape.matmul(x, k)?;
    let vx = tape.matmul(x, v)?;
    let scores = tape.window_scores(qx, kx, n, scale)?;
    let alpha = tape.causal_softmax(scores, n)?;
    Ok((tape.window_mix(alpha, vx, n)?, alpha))
}

/// Mixing with a free `[n x n]` matrix `a`; only its lower triangle acts.
pub fn direct_attention_mix(tape: &mut Tape, x: Var, a: Var, v: Var, n: usize) -> Result<Var, TensorError> {
    let vx = tape.matmul(x, v)?;
    tape.window_mix(a, vx, n)
}
