use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::config::{eval_seed, probe_seed, resolve_model, RunConfig};
use super::PipelineError;
use crate::analysis::{
    attention_map_csv, bandedness_score, expand_grid, extract_attention_maps, filters_csv, modal_zero_out_eval,
    ood_rtg_sweep, pivot_csv, runs_csv, AblationResult, AnalysisError, SweepRow, ZeroOutRow,
};
use crate::data::{read_dataset, write_dataset, Dataset, NormStats, ReturnStats};
use crate::envs::generate_dataset;
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, MixerKind, Modal, Model, ModelConfig};
use crate::train::{
    evaluate, metrics_csv, target_for_multiple, EvalPlan, EvalRequest, TrainSession,
};

pub const CONFIG_SNAPSHOT: &str = "resolved_config.toml";
const FINAL_CKPT: &str = "model_final.ckpt";
const BEST_CKPT: &str = "model_best.ckpt";
const METRICS_HEADER: &str = "update,loss,grad_norm,lr,eval_target,eval_return_mean,eval_return_std";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_snapshot(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    write_text(&out.join(CONFIG_SNAPSHOT), &cfg.to_toml()?)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, PipelineError> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(PipelineError::Missing { what: "dataset", path });
    }
    Ok(read_dataset(&path)?)
}

fn load_checkpoint(out: &Path, explicit: Option<&Path>) -> Result<Checkpoint, PipelineError> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| out.join(FINAL_CKPT));
    if !path.exists() {
        return Err(PipelineError::Missing { what: "checkpoint", path });
    }
    Ok(read_checkpoint(&path)?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenReport {
    pub path: PathBuf,
    pub episodes: usize,
    pub steps: usize,
    pub returns: ReturnStats,
}

/// Rolls out the configured behavior mixture and writes the dataset file.
/// Nothing is written if the config is invalid.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<GenReport, PipelineError> {
    cfg.validate()?;
    let cfg = cfg.resolve(out);
    let seed = cfg.dataset.seed.expect("resolved");
    let ds = generate_dataset(&cfg.env, &cfg.dataset.mixture(), cfg.dataset.episodes, seed)?;
    ensure_dir(out)?;
    let path = cfg.dataset_path();
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    write_dataset(&ds, &path)?;
    write_snapshot(&cfg, out)?;
    Ok(GenReport {
        path,
        episodes: ds.len(),
        steps: ds.total_steps(),
        returns: ds.return_stats(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Completed updates, counting any resumed ones.
    pub step: u64,
    pub final_loss: Option<f64>,
    pub best: Option<(u64, f64)>,
    pub model: ModelConfig,
    pub warnings: Vec<String>,
    pub elapsed: Duration,
}

/// Best mean return at `target` among already-recorded metric lines.
fn recorded_best(lines: &[String], target: f64) -> Option<f64> {
    lines
        .iter()
        .filter_map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            let t: f64 = cells.get(4)?.parse().ok()?;
            let m: f64 = cells.get(5)?.parse().ok()?;
            (t == target).then_some(m)
        })
        .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))))
}

/// Trains on the dataset file and writes the final and best checkpoints
/// plus `metrics.csv`. With `resume`, continues from the final checkpoint
/// in `out` up to `train.updates`.
pub fn train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<TrainReport, PipelineError> {
    let started = Instant::now();
    cfg.validate()?;
    let mut cfg = cfg.resolve(out);
    let raw = load_dataset(&cfg)?;
    let (norm, ds, warnings) = raw.normalize_states();
    let model_cfg = resolve_model(&cfg.model, &raw)?;
    cfg.model = model_cfg.clone();

    let final_path = out.join(FINAL_CKPT);
    let metrics_path = out.join("metrics.csv");
    let (model, optim, mut prior) = if resume {
        if !final_path.exists() {
            return Err(PipelineError::Missing {
                what: "checkpoint to resume",
                path: final_path,
            });
        }
        let ck = read_checkpoint(&final_path)?;
        if ck.model.config() != &model_cfg {
            return Err(PipelineError::Config(format!(
                "{} was trained with a different model config",
                final_path.display()
            )));
        }
        let Some(mut optim) = ck.optim else {
            return Err(PipelineError::Config(format!("{} has no optimizer state", final_path.display())));
        };
        optim.config = cfg.train.optimizer();
        let prior: Vec<String> = match std::fs::read_to_string(&metrics_path) {
            Ok(text) => text
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|u| u.parse::<u64>().ok()).is_some_and(|u| u <= ck.step))
                .map(String::from)
                .collect(),
            Err(_) => vec![],
        };
        (ck.model, Some(optim), prior)
    } else {
        (Model::new(model_cfg.clone(), cfg.seed)?, None, vec![])
    };

    let returns = raw.return_stats();
    let targets = cfg.eval.targets(returns.max, returns.min);
    let plan = (!targets.is_empty()).then(|| EvalPlan {
        spec: &cfg.env,
        norm: &norm,
        targets: targets.clone(),
        episodes: cfg.eval.episodes,
        deterministic: cfg.eval.deterministic,
        seed: eval_seed(cfg.seed),
    });
    let session = TrainSession {
        dataset: &ds,
        config: &cfg.train,
        seed: cfg.seed,
        eval: plan,
    };
    let outcome = crate::train::train(model, optim, &session)?;

    ensure_dir(out)?;
    let step = outcome.optim.step_count();
    write_checkpoint(
        &Checkpoint {
            model: outcome.model,
            norm: Some(norm.clone()),
            step,
            optim: Some(outcome.optim),
        },
        &final_path,
    )?;
    let prev_best = targets.first().and_then(|&t| recorded_best(&prior, t));
    let mut best = None;
    if let Some((m, u, v)) = outcome.best {
        if prev_best.is_none_or(|p| v > p) {
            write_checkpoint(
                &Checkpoint {
                    model: m,
                    norm: Some(norm.clone()),
                    step: u,
                    optim: None,
                },
                &out.join(BEST_CKPT),
            )?;
            best = Some((u, v));
        }
    }
    let fresh = metrics_csv(&outcome.metrics);
    prior.extend(fresh.lines().skip(1).map(String::from));
    let mut text = format!("{METRICS_HEADER}\n");
    for l in &prior {
        text.push_str(l);
        text.push('\n');
    }
    write_text(&metrics_path, &text)?;
    write_snapshot(&cfg, out)?;
    if let Some(msg) = outcome.failure {
        return Err(PipelineError::Numeric(msg));
    }
    Ok(TrainReport {
        step,
        final_loss: outcome.metrics.last().map(|r| r.loss),
        best,
        model: model_cfg,
        warnings,
        elapsed: started.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub multiple: Option<f64>,
    pub target: f64,
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
}

fn norm_of(ck: &Checkpoint) -> NormStats {
    ck.norm
        .clone()
        .unwrap_or_else(|| NormStats::identity(ck.model.config().state_dim))
}

/// Evaluates a checkpoint at every configured target and writes
/// `eval.csv`, one row per target.
pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<Vec<EvalRow>, PipelineError> {
    cfg.validate()?;
    let cfg = cfg.resolve(out);
    let ck = load_checkpoint(out, checkpoint)?;
    let norm = norm_of(&ck);
    let mut targets: Vec<(Option<f64>, f64)> = vec![];
    if !cfg.eval.target_multiples.is_empty() {
        let r = load_dataset(&cfg)?.return_stats();
        targets.extend(
            cfg.eval
                .target_multiples
                .iter()
                .map(|&m| (Some(m), target_for_multiple(m, r.max, r.min))),
        );
    }
    targets.extend(cfg.eval.target_returns.iter().map(|&t| (None, t)));
    let mut rows = vec![];
    for (multiple, target) in targets {
        let res = evaluate(
            &ck.model,
            &EvalRequest {
                spec: &cfg.env,
                norm: &norm,
                target,
                episodes: cfg.eval.episodes,
                deterministic: cfg.eval.deterministic,
                seed: eval_seed(cfg.seed),
                transform: None,
                trace: false,
            },
        )?;
        rows.push(EvalRow {
            multiple,
            target,
            episodes: cfg.eval.episodes,
            mean: res.mean,
            std: res.std,
        });
    }
    ensure_dir(out)?;
    let mut text = String::from("target_multiple,target,episodes,return_mean,return_std\n");
    for r in &rows {
        let _ = writeln!(text, "{},{},{},{},{}", opt(r.multiple), r.target, r.episodes, r.mean, r.std);
    }
    write_text(&out.join("eval.csv"), &text)?;
    write_snapshot(&cfg, out)?;
    Ok(rows)
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeReport {
    pub files: Vec<PathBuf>,
    /// `(map name, score)`, per probed block then the mean map.
    pub bandedness: Vec<(String, f64)>,
    pub zero_out: Vec<ZeroOutRow>,
    pub sweep: Vec<SweepRow>,
    pub notes: Vec<String>,
}

fn modal_name(m: Option<Modal>) -> &'static str {
    match m {
        None => "none",
        Some(Modal::Rtg) => "rtg",
        Some(Modal::State) => "state",
        Some(Modal::Action) => "action",
    }
}

/// Attention maps and bandedness (attention-style blocks), filter export
/// (conv blocks), modal zero-out and the target-return sweep.
pub fn analyze(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<AnalyzeReport, PipelineError> {
    cfg.validate()?;
    let cfg = cfg.resolve(out);
    let ck = load_checkpoint(out, checkpoint)?;
    let model = &ck.model;
    let norm = norm_of(&ck);
    let raw = load_dataset(&cfg)?;
    let probe_set = raw.normalize_states().1;
    let returns = raw.return_stats();
    ensure_dir(out)?;
    let mut report = AnalyzeReport::default();
    let emit = |name: &str, text: &str, report: &mut AnalyzeReport| -> Result<(), PipelineError> {
        let p = out.join(name);
        write_text(&p, text)?;
        report.files.push(p);
        Ok(())
    };

    let kinds = model.block_kinds();
    let has_mixing = kinds.iter().any(|k| *k != MixerKind::Conv);
    if has_mixing || cfg.analysis.layers.is_some() {
        let maps = extract_attention_maps(
            model,
            &probe_set,
            cfg.analysis.layers.as_deref(),
            cfg.analysis.probe_windows,
            probe_seed(cfg.seed),
        )?;
        let mut band = String::from("map,band,score\n");
        let named = maps
            .layers
            .iter()
            .map(|(b, m)| (format!("block{b}"), m))
            .chain(std::iter::once(("mean".to_string(), &maps.mean)));
        for (name, map) in named {
            emit(&format!("attention_{name}.csv"), &attention_map_csv(map, &maps.labels)?, &mut report)?;
            let score = match bandedness_score(map, cfg.analysis.band) {
                Ok(s) => s,
                Err(AnalysisError::ZeroMap) => f64::NAN,
                Err(e) => return Err(e.into()),
            };
            let _ = writeln!(band, "{name},{},{score}", cfg.analysis.band);
            report.bandedness.push((name, score));
        }
        emit("bandedness.csv", &band, &mut report)?;
    } else {
        report
            .notes
            .push("no attention-style blocks; attention maps skipped, filters exported instead".into());
    }
    if kinds.contains(&MixerKind::Conv) {
        emit("filters.csv", &filters_csv(model), &mut report)?;
    }

    let base = EvalRequest {
        spec: &cfg.env,
        norm: &norm,
        target: target_for_multiple(cfg.analysis.target_multiple, returns.max, returns.min),
        episodes: cfg.eval.episodes,
        deterministic: cfg.eval.deterministic,
        seed: eval_seed(cfg.seed),
        transform: None,
        trace: false,
    };
    let modals = [Some(Modal::Rtg), Some(Modal::State), Some(Modal::Action)];
    report.zero_out = modal_zero_out_eval(model, &base, &modals, returns.min)?;
    let mut text = String::from("modal,intact_mean,zeroed_mean,ratio\n");
    for r in &report.zero_out {
        let _ = writeln!(text, "{},{},{},{}", modal_name(r.modal), r.intact_mean, r.zeroed_mean, r.ratio);
    }
    emit("zero_out.csv", &text, &mut report)?;

    report.sweep = ood_rtg_sweep(model, &base, &cfg.analysis.sweep_multiples, returns.max, returns.min)?;
    let mut text = String::from("multiple,target,return_mean,return_std\n");
    for r in &report.sweep {
        let _ = writeln!(text, "{},{},{},{}", r.multiple, r.target, r.mean, r.std);
    }
    emit("ood_sweep.csv", &text, &mut report)?;
    write_snapshot(&cfg, out)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AblateReport {
    pub results: Vec<AblationResult>,
    /// `(cell descriptor, reason)` for cells not run or that failed.
    pub skipped: Vec<(String, String)>,
    pub pivot: String,
}

fn axis_short(name: &str) -> &str {
    match name {
        "context_len" => "K",
        "filter_len" => "L",
        "filter_count" => "filters",
        "include_action_tokens" => "actions",
        "projection_layer" => "projection",
        other => other,
    }
}

/// Trains one grid cell at one seed and scores its final model.
fn run_cell(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    raw: &Dataset,
    ds: &Dataset,
    norm: &NormStats,
    seed: u64,
) -> Result<f64, PipelineError> {
    let mc = resolve_model(model_cfg, raw)?;
    let session = TrainSession {
        dataset: ds,
        config: &cfg.train,
        seed,
        eval: None,
    };
    let outcome = crate::train::train(Model::new(mc, seed)?, None, &session)?;
    if let Some(msg) = outcome.failure {
        return Err(PipelineError::Numeric(msg));
    }
    let r = raw.return_stats();
    let res = evaluate(
        &outcome.model,
        &EvalRequest {
            spec: &cfg.env,
            norm,
            target: target_for_multiple(cfg.ablation.target_multiple, r.max, r.min),
            episodes: cfg.eval.episodes,
            deterministic: cfg.eval.deterministic,
            seed: eval_seed(seed),
            transform: None,
            trace: false,
        },
    )?;
    Ok(res.mean)
}

/// Trains and scores every grid cell at every seed on up to `jobs`
/// threads. Uses the dataset file when it exists and otherwise generates
/// the configured dataset in memory. Writes `ablation_runs.csv` (one row
/// per cell and seed), `ablation_table.csv` (mean and std pivoted on one
/// axis) and `ablation_skipped.csv`.
pub fn ablate(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<AblateReport, PipelineError> {
    cfg.validate()?;
    let cfg = cfg.resolve(out);
    let raw = if cfg.dataset_path().exists() {
        load_dataset(&cfg)?
    } else {
        let seed = cfg.dataset.seed.expect("resolved");
        generate_dataset(&cfg.env, &cfg.dataset.mixture(), cfg.dataset.episodes, seed)?
    };
    let (norm, ds, _) = raw.normalize_states();
    // shape fields only; the rest resolves per cell so that e.g. the
    // positional-embedding default follows each cell's mixer
    let mut base = cfg.model.clone();
    if base.state_dim == 0 {
        base.state_dim = raw.meta.state_dim;
    }
    base.action_space.get_or_insert(raw.meta.action_space);
    let (cells, skipped_cells) = expand_grid(&base, &cfg.ablation.axes);
    let mut skipped: Vec<(String, String)> = skipped_cells.iter().map(|(c, r)| (c.descriptor(), r.clone())).collect();
    let pivot = match &cfg.ablation.pivot {
        Some(p) => axis_short(p).to_string(),
        None => cells
            .first()
            .and_then(|c| c.values.last())
            .map(|v| v.axis().to_string())
            .unwrap_or_else(|| "base".into()),
    };

    let seeds = &cfg.ablation.seeds;
    let tasks: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let slots: Vec<Mutex<Option<Result<f64, PipelineError>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(c, seed)) = tasks.get(i) else { break };
                let r = run_cell(&cfg, &cells[c].config, &raw, &ds, &norm, seed);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });

    let mut values: Vec<Vec<f64>> = vec![vec![]; cells.len()];
    for (slot, &(c, seed)) in slots.into_iter().zip(&tasks) {
        match slot.into_inner().expect("slot lock").expect("every task ran") {
            Ok(v) => values[c].push(v),
            Err(PipelineError::Numeric(msg)) => {
                skipped.push((format!("{};seed={seed}", cells[c].descriptor()), msg));
                values[c].push(f64::NAN);
            }
            Err(e) => return Err(e),
        }
    }
    let results: Vec<AblationResult> = cells
        .into_iter()
        .zip(values)
        .map(|(cell, v)| AblationResult::new(cell, "return_mean", seeds.clone(), v))
        .collect();

    ensure_dir(out)?;
    write_text(&out.join("ablation_runs.csv"), &runs_csv(&results))?;
    write_text(&out.join("ablation_table.csv"), &pivot_csv(&results, &pivot))?;
    let mut text = String::from("cell,reason\n");
    for (c, r) in &skipped {
        let _ = writeln!(text, "{c},\"{}\"", r.replace('"', "'"));
    }
    write_text(&out.join("ablation_skipped.csv"), &text)?;
    write_snapshot(&cfg, out)?;
    Ok(AblateReport {
        results,
        skipped,
        pivot,
    })
}
