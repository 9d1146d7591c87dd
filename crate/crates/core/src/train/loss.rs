use super::TrainError;
use crate::data::{ActionSpace, PaddedWindow};
use crate::tensor::{Tape, Tensor, Var};

/// Row weights that turn a summed loss into the mean over windows of each
/// window's mean over its valid timesteps.
pub fn window_loss_weights(windows: &[PaddedWindow]) -> Result<Vec<f64>, TrainError> {
    let live = windows.iter().filter(|w| w.valid_count() > 0).count();
    if live == 0 {
        return Err(TrainError::NoValidTimesteps);
    }
    Ok(windows
        .iter()
        .flat_map(|w| {
            let v = w.valid_count();
            w.mask
                .iter()
                .map(move |&m| if m { 1.0 / (v as f64 * live as f64) } else { 0.0 })
        })
        .collect())
}

/// Action-prediction loss for `[B*K x width]` predictions: squared error
/// averaged over action dims for continuous spaces, cross-entropy for
/// discrete ones. Masked timesteps are ignored.
pub fn dc_loss(
    tape: &mut Tape,
    predictions: Var,
    windows: &[PaddedWindow],
    space: ActionSpace,
) -> Result<Var, TrainError> {
    let weights = window_loss_weights(windows)?;
    Ok(match space {
        ActionSpace::Continuous { dim } => {
            let target = Tensor::new(
                vec![weights.len(), dim],
                windows.iter().flat_map(|w| w.actions.iter().flatten().copied()).collect(),
            )?;
            tape.mse_loss(predictions, &target, weights)?
        }
        ActionSpace::Discrete { .. } => {
            let labels: Vec<usize> = windows.iter().flat_map(|w| w.labels.iter().copied()).collect();
            tape.cross_entropy(predictions, &labels, weights)?
        }
    })
}
