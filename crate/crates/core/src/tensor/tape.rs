use super::kernel::gemm;
use super::{gelu_grad_scalar, gelu_scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Sum(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    WindowScores {
        q: Var,
        k: Var,
        window: usize,
        scale: f64,
    },
    CausalSoftmax(Var, usize),
    WindowMix {
        weights: Var,
        v: Var,
        window: usize,
    },
    ConvMix {
        x: Var,
        banks: Vec<Var>,
        bank_of: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Record of executed ops, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    replayed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("shape"))
    }

    /// Gradient buffer, or zeros when the value never influenced the loss.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.replayed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), k, 1, bv.data(), n, 1, 0.0, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(mismatch("add_row_bias", xv, bv));
        }
        let c = xv.cols();
        let b = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, rg, Op::AddRowBias(x, bias)))
    }

    /// `x @ w + b`, the usual dense layer.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| v * s).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Scale(x, s))
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if c.len() != xv.len() {
            return Err(TensorError::InvalidArgument {
                op: "mul_const",
                msg: format!("{} factors for {} values", c.len(), xv.len()),
            });
        }
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().zip(&c).map(|(a, b)| a * b).collect(),
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::MulConst(x, c)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| gelu_scalar(v)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, rg, Op::Relu(x))
    }

    /// Row-wise normalization to zero mean and unit population variance,
    /// then `* gain + bias`. Rows with zero variance and `eps == 0`
    /// normalize to zero.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if bv.len() != d {
            return Err(mismatch("layer_norm", xv, bv));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let denom = (var + eps).sqrt();
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// `out[i] = x[idx[i]]` row-wise.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {r} rows"),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::GatherRows(x, idx)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(mismatch("concat_rows", self.value(parts[0]), pv));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, c], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Per-window inner products `scale * <q_i, k_j>` for `j <= i`; entries
    /// above the diagonal are left at zero. Output is `[B*n x n]`.
    pub fn window_scores(&mut self, q: Var, k: Var, window: usize, scale: f64) -> Result<Var, TensorError> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.shape() != kv.shape() || qv.rows() % window != 0 {
            return Err(mismatch("window_scores", qv, kv));
        }
        let (rows, dk) = (qv.rows(), qv.cols());
        let mut out = vec![0.0; rows * window];
        for r in 0..rows {
            let (base, i) = (r - r % window, r % window);
            let qr = qv.row(r);
            for j in 0..=i {
                let kr = kv.row(base + j);
                let dot: f64 = qr.iter().zip(kr).map(|(a, b)| a * b).sum();
                out[r * window + j] = scale * dot;
            }
            debug_assert_eq!(qr.len(), dk);
        }
        let value = Tensor::new(vec![rows, window], out)?;
        let rg = self.rg(&[q, k]);
        Ok(self.push(value, rg, Op::WindowScores { q, k, window, scale }))
    }

    /// Softmax of row `r` over columns `0..=r % window`, exact zeros above
    /// the diagonal. Max-subtracted for stability.
    pub fn causal_softmax(&mut self, scores: Var, window: usize) -> Result<Var, TensorError> {
        let sv = self.value(scores);
        if sv.cols() != window || sv.rows() % window != 0 {
            return Err(TensorError::InvalidArgument {
                op: "causal_softmax",
                msg: format!("shape {:?} is not a stack of {window}x{window} blocks", sv.shape()),
            });
        }
        let mut out = vec![0.0; sv.len()];
        for r in 0..sv.rows() {
            let i = r % window;
            let row = &sv.row(r)[..=i];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                out[r * window + j] = e / z;
            }
        }
        let value = Tensor::new(sv.shape().to_vec(), out)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(value, rg, Op::CausalSoftmax(scores, window)))
    }

    /// `z_i = sum_{j <= i} w[i, j] v_j` within each window. `weights` is
    /// either per-row `[B*n x n]` or a single shared `[n x n]` matrix.
    /// Entries above the diagonal are ignored and receive no gradient.
    pub fn window_mix(&mut self, weights: Var, v: Var, window: usize) -> Result<Var, TensorError> {
        let (wv, vv) = (self.value(weights), self.value(v));
        let rows = vv.rows();
        if wv.cols() != window
            || rows % window != 0
            || !(wv.rows() == rows || wv.rows() == window)
        {
            return Err(mismatch("window_mix", wv, vv));
        }
        let shared = wv.rows() != rows;
        let d = vv.cols();
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let (base, i) = (r - r % window, r % window);
            let wrow = wv.row(if shared { i } else { r });
            let o = &mut out[r * d..(r + 1) * d];
            for j in 0..=i {
                let a = wrow[j];
                if a == 0.0 {
                    continue;
                }
                for (oc, vc) in o.iter_mut().zip(vv.row(base + j)) {
                    *oc += a * vc;
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[weights, v]);
        Ok(self.push(value, rg, Op::WindowMix { weights, v, window }))
    }

    /// Depthwise causal convolution inside each window of `bank_of.len()`
    /// rows. Row `p` of a window uses filter bank `banks[bank_of[p]]`
    /// (`[d x L]`, lag along the columns) and sees rows `p, p-1, ...,
    /// p-L+1`, treating rows before the window start as zero.
    pub fn conv_mix(&mut self, x: Var, banks: &[Var], bank_of: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let window = bank_of.len();
        let (rows, d) = (xv.rows(), xv.cols());
        if window == 0 || rows % window != 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv_mix",
                msg: format!("{rows} rows is not a multiple of window {window}"),
            });
        }
        let l = self.value(banks[0]).cols();
        for &b in banks {
            let bv = self.value(b);
            if bv.rows() != d || bv.cols() != l {
                return Err(mismatch("conv_mix", xv, bv));
            }
        }
        if bank_of.iter().any(|&b| b >= banks.len()) {
            return Err(TensorError::InvalidArgument {
                op: "conv_mix",
                msg: "bank index out of range".into(),
            });
        }
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let p = r % window;
            let w = self.value(banks[bank_of[p]]).data();
            let o = &mut out[r * d..(r + 1) * d];
            for lag in 0..l.min(p + 1) {
                let src = xv.row(r - lag);
                for q in 0..d {
                    o[q] += w[q * l + lag] * src[q];
                }
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let mut deps = banks.to_vec();
        deps.push(x);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            rg,
            Op::ConvMix {
                x,
                banks: banks.to_vec(),
                bank_of: bank_of.to_vec(),
            },
        ))
    }

    /// `sum_r weights[r] * mean_c (pred[r,c] - target[r,c])^2`.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor, weights: Vec<f64>) -> Result<Var, TensorError> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(mismatch("mse_loss", pv, target));
        }
        if weights.len() != pv.rows() {
            return Err(TensorError::InvalidArgument {
                op: "mse_loss",
                msg: format!("{} weights for {} rows", weights.len(), pv.rows()),
            });
        }
        let c = pv.cols();
        let mut total = 0.0;
        for (r, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let se: f64 = pv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            total += w * se / c as f64;
        }
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::Mse {
                pred,
                target: target.data().to_vec(),
                weights,
            },
        ))
    }

    /// `sum_r weights[r] * (logsumexp(logits[r]) - logits[r, label[r]])`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Vec<f64>) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if labels.len() != rows || weights.len() != rows {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{} labels / {} weights for {rows} rows", labels.len(), weights.len()),
            });
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("label {bad} out of range for {c} classes"),
            });
        }
        let mut probs = vec![0.0; rows * c];
        let mut total = 0.0;
        for r in 0..rows {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            total += weights[r] * (lse - row[labels[r]]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
            },
        ))
    }

    /// Replays the tape in reverse from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.replayed {
            return Err(TensorError::AlreadyReplayed);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.replayed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    // dA = dC @ B^T
                    accumulate(&mut grads[a.0], m * k, |ga| {
                        gemm(m, n, k, 1.0, g, n, 1, bv.data(), 1, n, 1.0, ga)
                    });
                }
                if needs(*b) {
                    // dB = A^T @ dC
                    accumulate(&mut grads[b.0], k * n, |gb| {
                        gemm(k, m, n, 1.0, av.data(), 1, k, g, n, 1, 1.0, gb)
                    });
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[idx].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                    });
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    });
                }
                if needs(*b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::AddRowBias(x, b) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.len(), |gx| {
                        gx.iter_mut().zip(g).for_each(|(a, y)| *a += y)
                    });
                }
                if needs(*b) {
                    let c = val(*b).len();
                    accumulate(&mut grads[b.0], c, |gb| {
                        for (i, y) in g.iter().enumerate() {
                            gb[i % c] += y;
                        }
                    });
                }
            }
            Op::Scale(x, s) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.len(), |gx| {
                        gx.iter_mut().zip(g).for_each(|(a, y)| *a += s * y)
                    });
                }
            }
            Op::MulConst(x, c) => {
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.len(), |gx| {
                        for i in 0..g.len() {
                            gx[i] += g[i] * c[i];
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let len = val(*x).len();
                    accumulate(&mut grads[x.0], len, |gx| gx.iter_mut().for_each(|a| *a += g[0]));
                }
            }
            Op::Gelu(x) | Op::Relu(x) => {
                if needs(*x) {
                    let xv = val(*x).data();
                    let relu = matches!(nodes[idx].op, Op::Relu(_));
                    accumulate(&mut grads[x.0], g.len(), |gx| {
                        for i in 0..g.len() {
                            let d = if relu {
                                if xv[i] > 0.0 { 1.0 } else { 0.0 }
                            } else {
                                gelu_grad_scalar(xv[i])
                            };
                            gx[i] += g[i] * d;
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).len();
                let rows = g.len() / d;
                let gv = val(*gain).data();
                if needs(*gain) {
                    accumulate(&mut grads[gain.0], d, |gg| {
                        for i in 0..g.len() {
                            gg[i % d] += g[i] * xhat[i];
                        }
                    });
                }
                if needs(*bias) {
                    accumulate(&mut grads[bias.0], d, |gb| {
                        for i in 0..g.len() {
                            gb[i % d] += g[i];
                        }
                    });
                }
                if needs(*x) {
                    accumulate(&mut grads[x.0], g.len(), |gx| {
                        for r in 0..rows {
                            let (lo, hi) = (r * d, (r + 1) * d);
                            let dh: Vec<f64> = (lo..hi).map(|i| g[i] * gv[i - lo]).collect();
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h =
                                dh.iter().zip(&xhat[lo..hi]).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for c in 0..d {
                                gx[lo + c] += inv_std[r] * (dh[c] - mean_dh - xhat[lo + c] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::GatherRows(x, idxs) => {
                if needs(*x) {
                    let xv = val(*x);
                    let c = xv.cols();
                    accumulate(&mut grads[x.0], xv.len(), |gx| {
                        for (o, &src) in idxs.iter().enumerate() {
                            for j in 0..c {
                                gx[src * c + j] += g[o * c + j];
                            }
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    if needs(*p) {
                        accumulate(&mut grads[p.0], len, |gp| {
                            gp.iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(a, y)| *a += y)
                        });
                    }
                    offset += len;
                }
            }
            Op::WindowScores { q, k, window, scale } => {
                let (qv, kv) = (val(*q), val(*k));
                let (rows, dk) = (qv.rows(), qv.cols());
                let w = *window;
                if needs(*q) {
                    accumulate(&mut grads[q.0], rows * dk, |gq| {
                        for r in 0..rows {
                            let (base, i) = (r - r % w, r % w);
                            for j in 0..=i {
                                let s = scale * g[r * w + j];
                                if s == 0.0 {
                                    continue;
                                }
                                let kr = kv.row(base + j);
                                for c in 0..dk {
                                    gq[r * dk + c] += s * kr[c];
                                }
                            }
                        }
                    });
                }
                if needs(*k) {
                    accumulate(&mut grads[k.0], rows * dk, |gk| {
                        for r in 0..rows {
                            let (base, i) = (r - r % w, r % w);
                            let qr = qv.row(r);
                            for j in 0..=i {
                                let s = scale * g[r * w + j];
                                if s == 0.0 {
                                    continue;
                                }
                                for c in 0..dk {
                                    gk[(base + j) * dk + c] += s * qr[c];
                                }
                            }
                        }
                    });
                }
            }
            Op::CausalSoftmax(x, window) => {
                if needs(*x) {
                    let y = nodes[idx].value.data();
                    let w = *window;
                    let rows = g.len() / w;
                    accumulate(&mut grads[x.0], g.len(), |gx| {
                        for r in 0..rows {
                            let i = r % w;
                            let lo = r * w;
                            let dot: f64 = (0..=i).map(|j| g[lo + j] * y[lo + j]).sum();
                            for j in 0..=i {
                                gx[lo + j] += y[lo + j] * (g[lo + j] - dot);
                            }
                        }
                    });
                }
            }
            Op::WindowMix { weights, v, window } => {
                let (wv, vv) = (val(*weights), val(*v));
                let w = *window;
                let (rows, d) = (vv.rows(), vv.cols());
                let shared = wv.rows() != rows;
                if needs(*weights) {
                    accumulate(&mut grads[weights.0], wv.len(), |gw| {
                        for r in 0..rows {
                            let (base, i) = (r - r % w, r % w);
                            let wr = if shared { i } else { r };
                            let gr = &g[r * d..(r + 1) * d];
                            for j in 0..=i {
                                let dot: f64 = gr.iter().zip(vv.row(base + j)).map(|(a, b)| a * b).sum();
                                gw[wr * w + j] += dot;
                            }
                        }
                    });
                }
                if needs(*v) {
                    accumulate(&mut grads[v.0], vv.len(), |gv| {
                        for r in 0..rows {
                            let (base, i) = (r - r % w, r % w);
                            let wrow = wv.row(if shared { i } else { r });
                            let gr = &g[r * d..(r + 1) * d];
                            for j in 0..=i {
                                let a = wrow[j];
                                if a == 0.0 {
                                    continue;
                                }
                                let dst = &mut gv[(base + j) * d..(base + j + 1) * d];
                                for (o, y) in dst.iter_mut().zip(gr) {
                                    *o += a * y;
                                }
                            }
                        }
                    });
                }
            }
            Op::ConvMix { x, banks, bank_of } => {
                let xv = val(*x);
                let (rows, d) = (xv.rows(), xv.cols());
                let window = bank_of.len();
                let l = val(banks[0]).cols();
                for (b_idx, b) in banks.iter().enumerate() {
                    if !needs(*b) {
                        continue;
                    }
                    accumulate(&mut grads[b.0], d * l, |gb| {
                        for r in 0..rows {
                            let p = r % window;
                            if bank_of[p] != b_idx {
                                continue;
                            }
                            let gr = &g[r * d..(r + 1) * d];
                            for lag in 0..l.min(p + 1) {
                                let src = xv.row(r - lag);
                                for q in 0..d {
                                    gb[q * l + lag] += gr[q] * src[q];
                                }
                            }
                        }
                    });
                }
                if needs(*x) {
                    accumulate(&mut grads[x.0], rows * d, |gx| {
                        for r in 0..rows {
                            let p = r % window;
                            let w = val(banks[bank_of[p]]).data();
                            let gr = &g[r * d..(r + 1) * d];
                            for lag in 0..l.min(p + 1) {
                                let dst = &mut gx[(r - lag) * d..(r - lag + 1) * d];
                                for q in 0..d {
                                    dst[q] += w[q * l + lag] * gr[q];
                                }
                            }
                        }
                    });
                }
            }
            Op::Mse {
                pred,
                target,
                weights,
            } => {
                if needs(*pred) {
                    let pv = val(*pred);
                    let c = pv.cols();
                    accumulate(&mut grads[pred.0], pv.len(), |gp| {
                        for (r, w) in weights.iter().enumerate() {
                            let s = g[0] * w * 2.0 / c as f64;
                            for j in 0..c {
                                let i = r * c + j;
                                gp[i] += s * (pv.data()[i] - target[i]);
                            }
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                if needs(*logits) {
                    let c = val(*logits).cols();
                    accumulate(&mut grads[logits.0], probs.len(), |gl| {
                        for (r, w) in weights.iter().enumerate() {
                            let s = g[0] * w;
                            for j in 0..c {
                                let onehot = if labels[r] == j { 1.0 } else { 0.0 };
                                gl[r * c + j] += s * (probs[r * c + j] - onehot);
                            }
                        }
                    });
                }
            }
        }
    }
}
