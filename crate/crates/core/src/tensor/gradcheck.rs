use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input, coordinate) where the maximum occurred
    pub worst: (usize, usize),
    pub per_input: Vec<f64>,
    pub coordinates: usize,
}

/// Central-difference check of a scalar function of a single tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Central-difference check over several input tensors at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |inputs: &[Tensor], grad: bool| -> Result<(f64, Option<Vec<Tensor>>), TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(TensorError::NonScalarLoss(value.shape().to_vec()));
        }
        let v = value.data()[0];
        if !grad {
            return Ok((v, None));
        }
        let grads = tape.backward(out)?;
        Ok((v, Some(vars.iter().map(|&x| grads.get_or_zeros(x)).collect())))
    };

    let (f0, analytic) = eval(xs, true)?;
    if !f0.is_finite() {
        return Err(TensorError::NonFiniteProbe { coords: vec![] });
    }
    let analytic = analytic.expect("requested gradients");

    let mut inputs = xs.to_vec();
    let mut bad = Vec::new();
    let mut per_input = vec![0.0; xs.len()];
    let mut worst = (0, 0);
    let mut max_err: f64 = 0.0;
    let mut coordinates = 0;
    for i in 0..xs.len() {
        for c in 0..xs[i].len() {
            let orig = xs[i].data()[c];
            inputs[i].data_mut()[c] = orig + eps;
            let (fp, _) = eval(&inputs, false)?;
            inputs[i].data_mut()[c] = orig - eps;
            let (fm, _) = eval(&inputs, false)?;
            inputs[i].data_mut()[c] = orig;
            coordinates += 1;
            if !fp.is_finite() || !fm.is_finite() {
                bad.push((i, c));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[c];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > per_input[i] {
                per_input[i] = err;
            }
            if err > max_err {
                max_err = err;
                worst = (i, c);
            }
        }
    }
    if !bad.is_empty() {
        return Err(TensorError::NonFiniteProbe { coords: bad });
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        worst,
        per_input,
        coordinates,
    })
}
