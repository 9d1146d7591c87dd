use std::fmt::Write as _;
use std::path::Path;

use super::{dc_loss, evaluate, EvalRequest, TrainConfig, TrainError};
use crate::data::{sample_subtrajectory, Dataset, NormStats};
use crate::envs::{stream_rng, EnvSpec};
use crate::model::{ForwardMode, Model};
use crate::tensor::{OptimState, Tape, TensorError};

/// Batch sampling and dropout for update `u` draw from stream
/// `BATCH_STREAM_BASE + u`, so a resumed run replays the same batches.
const BATCH_STREAM_BASE: u64 = 1 << 32;

/// Periodic evaluation during training.
pub struct EvalPlan<'a> {
    pub spec: &'a EnvSpec,
    pub norm: &'a NormStats,
    /// Absolute targets; the first one ranks checkpoints.
    pub targets: Vec<f64>,
    pub episodes: usize,
    pub deterministic: bool,
    pub seed: u64,
}

pub struct TrainSession<'a> {
    /// Must already be state-normalized.
    pub dataset: &'a Dataset,
    pub config: &'a TrainConfig,
    pub seed: u64,
    pub eval: Option<EvalPlan<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub update: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub eval_target: Option<f64>,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters after the last accepted update.
    pub model: Model,
    pub optim: OptimState,
    pub metrics: Vec<MetricRow>,
    /// Highest mean return at the first eval target, with its update.
    pub best: Option<(Model, u64, f64)>,
    /// Set when the run stopped on a non-finite loss or gradient.
    pub failure: Option<String>,
}

/// Trains until the optimizer has taken `config.updates` steps. Pass the
/// optimizer state from a checkpoint to resume.
pub fn train(mut model: Model, optim: Option<OptimState>, session: &TrainSession) -> Result<TrainOutcome, TrainError> {
    let cfg = session.config;
    cfg.validate()?;
    let ds = session.dataset;
    if ds.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    if !ds.is_normalized() {
        return Err(TrainError::Config("dataset states must be normalized before training".into()));
    }
    let mc = model.config().clone();
    if mc.action_space != Some(ds.meta.action_space) || mc.state_dim != ds.meta.state_dim {
        return Err(TrainError::Config(format!(
            "model expects state dim {} and {:?}, dataset has state dim {} and {:?}",
            mc.state_dim, mc.action_space, ds.meta.state_dim, ds.meta.action_space
        )));
    }
    let space = ds.meta.action_space;
    let mut optim = match optim {
        Some(o) => {
            if o.first_moments().len() != model.params().len() {
                return Err(TrainError::Config("optimizer state does not match the model".into()));
            }
            o
        }
        None => OptimState::new(cfg.optimizer(), model.params()),
    };

    let mut metrics = vec![];
    let mut best: Option<(Model, u64, f64)> = None;
    let mut failure = None;
    while optim.step_count() < cfg.updates {
        let u = optim.step_count();
        let mut rng = stream_rng(session.seed, BATCH_STREAM_BASE + u);
        let windows: Vec<_> = (0..cfg.batch_size)
            .map(|_| sample_subtrajectory(ds, mc.context_len, &mut rng))
            .collect();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &windows, ForwardMode::Train(&mut rng))?;
        let loss = dc_loss(&mut tape, pass.predictions, &windows, space)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            failure = Some(format!("non-finite loss {loss_value} at update {}", u + 1));
            break;
        }
        let grads = tape.backward(loss)?;
        let grads: Vec<_> = pass.params.iter().map(|&v| grads.get_or_zeros(v)).collect();
        let report = match optim.step(model.params_mut(), &grads) {
            Ok(r) => r,
            Err(TensorError::NonFiniteGradient { param, index }) => {
                failure = Some(format!(
                    "non-finite gradient in {}[{index}] at update {}",
                    model.param_names()[param],
                    u + 1
                ));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let update = optim.step_count();
        let row = MetricRow {
            update,
            loss: loss_value,
            grad_norm: report.grad_norm,
            lr: report.lr,
            eval_target: None,
            eval_return_mean: None,
            eval_return_std: None,
        };
        let due = update == cfg.updates || (cfg.eval_every > 0 && update % cfg.eval_every == 0);
        match (&session.eval, due) {
            (Some(plan), true) if !plan.targets.is_empty() => {
                for (ti, &target) in plan.targets.iter().enumerate() {
                    let res = evaluate(
                        &model,
                        &EvalRequest {
                            spec: plan.spec,
                            norm: plan.norm,
                            target,
                            episodes: plan.episodes,
                            deterministic: plan.deterministic,
                            seed: plan.seed,
                            transform: None,
                            trace: false,
                        },
                    )?;
                    if ti == 0 && best.as_ref().is_none_or(|b| res.mean > b.2) {
                        best = Some((model.clone(), update, res.mean));
                    }
                    metrics.push(MetricRow {
                        eval_target: Some(target),
                        eval_return_mean: Some(res.mean),
                        eval_return_std: Some(res.std),
                        ..row.clone()
                    });
                }
            }
            _ => metrics.push(row),
        }
    }
    Ok(TrainOutcome {
        model,
        optim,
        metrics,
        best,
        failure,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("update,loss,grad_norm,lr,eval_target,eval_return_mean,eval_return_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.update,
            r.loss,
            r.grad_norm,
            r.lr,
            cell(r.eval_target),
            cell(r.eval_return_mean),
            cell(r.eval_return_std)
        );
    }
    out
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> std::io::Result<()> {
    std::fs::write(path, metrics_csv(rows))
}
