use std::path::Path;

use dconv::model::read_checkpoint;
use dconv::pipeline::{self, parse_config, PipelineError, RunConfig, CONFIG_SNAPSHOT};
use sha2::{Digest, Sha256};

const TINY: &str = r#"
seed = 4
[env]
name = "point_reach"
horizon = 15
[dataset]
episodes = 12
mix = [{ policy = "expert", weight = 0.5 }, { policy = "medium", weight = 0.5 }]
[model]
context_len = 3
hidden_dim = 8
attn_dim = 8
n_blocks = 1
filter_len = 3
dropout = 0.0
[train]
batch_size = 8
updates = 12
lr = 0.001
warmup_steps = 4
eval_every = 6
[eval]
target_multiples = [1.0, 2.0, 0.5]
episodes = 3
[analysis]
probe_windows = 8
sweep_multiples = [1.0, 2.0, 4.0]
"#;

fn tiny() -> RunConfig {
    parse_config(TINY).unwrap()
}

fn hash(p: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(p).unwrap()).to_vec()
}

fn lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

#[test]
fn gen_data_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = pipeline::gen_data(&tiny(), &a).unwrap();
    pipeline::gen_data(&tiny(), &b).unwrap();
    assert_eq!(ra.episodes, 12);
    assert_eq!(hash(&a.join("dataset.jsonl")), hash(&b.join("dataset.jsonl")));
    assert!(a.join(CONFIG_SNAPSHOT).exists());

    let mut bad = tiny();
    bad.dataset.episodes = 0;
    let c = dir.path().join("c");
    let err = pipeline::gen_data(&bad, &c).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!c.exists());
}

#[test]
fn train_eval_analyze_round() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    pipeline::gen_data(&tiny(), out).unwrap();
    let report = pipeline::train(&tiny(), out, false).unwrap();
    assert_eq!(report.step, 12);
    assert!(report.best.is_some());
    for f in ["model_final.ckpt", "model_best.ckpt", "metrics.csv", CONFIG_SNAPSHOT] {
        assert!(out.join(f).exists(), "{f}");
    }
    // 10 plain rows plus 3 eval rows at updates 6 and 12
    assert_eq!(lines(&out.join("metrics.csv")).len(), 1 + 10 + 6);

    let rows = pipeline::eval(&tiny(), out, None).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(lines(&out.join("eval.csv")).len(), 4);

    let a = pipeline::analyze(&tiny(), out, None).unwrap();
    assert_eq!(a.zero_out.len(), 3);
    assert_eq!(lines(&out.join("zero_out.csv")).len(), 4);
    assert_eq!(lines(&out.join("ood_sweep.csv")).len(), 4);
    assert!(out.join("filters.csv").exists());
    assert!(!out.join("bandedness.csv").exists());
    assert!(!a.notes.is_empty());

    let mut probe_conv = tiny();
    probe_conv.analysis.layers = Some(vec![0]);
    let err = pipeline::analyze(&probe_conv, out, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("filters"), "{err}");
}

#[test]
fn analyze_direct_attention_emits_maps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let mut cfg = tiny();
    cfg.model.mixer = dconv::model::MixerConfig::DirectAttention;
    pipeline::gen_data(&cfg, out).unwrap();
    pipeline::train(&cfg, out, false).unwrap();
    let a = pipeline::analyze(&cfg, out, None).unwrap();
    assert_eq!(a.bandedness.len(), 2);
    let map = lines(&out.join("attention_block0.csv"));
    assert_eq!(map[0], "token,R1,s1,a1,R2,s2,a2,R3,s3");
    assert_eq!(map.len(), 9);
    assert!(!out.join("filters.csv").exists());
}

#[test]
fn rerun_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        pipeline::gen_data(&tiny(), out).unwrap();
        pipeline::train(&tiny(), out, false).unwrap();
        pipeline::eval(&tiny(), out, None).unwrap();
    }
    for f in ["model_final.ckpt", "model_best.ckpt", "metrics.csv", "eval.csv"] {
        assert_eq!(hash(&a.join(f)), hash(&b.join(f)), "{f}");
    }
}

#[test]
fn resume_continues_from_recorded_step() {
    let dir = tempfile::tempdir().unwrap();
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    for out in [&full, &split] {
        pipeline::gen_data(&tiny(), out).unwrap();
    }
    pipeline::train(&tiny(), &full, false).unwrap();
    let mut half = tiny();
    half.train.updates = 6;
    pipeline::train(&half, &split, false).unwrap();
    assert_eq!(read_checkpoint(&split.join("model_final.ckpt")).unwrap().step, 6);
    let r = pipeline::train(&tiny(), &split, true).unwrap();
    assert_eq!(r.step, 12);
    assert_eq!(hash(&full.join("model_final.ckpt")), hash(&split.join("model_final.ckpt")));
    assert_eq!(lines(&full.join("metrics.csv")), lines(&split.join("metrics.csv")));
}

#[test]
fn startup_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let err = pipeline::train(&tiny(), out, false).unwrap_err();
    assert!(matches!(err, PipelineError::Missing { .. }));
    assert!(err.to_string().contains("dataset.jsonl"), "{err}");

    pipeline::gen_data(&tiny(), out).unwrap();
    let mut cfg = tiny();
    cfg.model.action_space = Some(dconv::data::ActionSpace::Discrete { n: 4 });
    let err = pipeline::train(&cfg, out, false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!out.join("model_final.ckpt").exists());

    let err = pipeline::train(&tiny(), out, true).unwrap_err();
    assert!(matches!(err, PipelineError::Missing { .. }));
}

#[test]
fn numeric_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.lr = 1e300;
    cfg.train.grad_clip = 0.0;
    cfg.train.warmup_steps = 0;
    pipeline::gen_data(&cfg, dir.path()).unwrap();
    let err = pipeline::train(&cfg, dir.path(), false).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(dir.path().join("model_final.ckpt").exists());
}

fn grid_cfg() -> RunConfig {
    let mut c = tiny();
    c.train.updates = 4;
    c.ablation.seeds = vec![1, 2];
    c.ablation.axes.context_len = vec![2, 3];
    c.ablation.axes.filter_len = vec![2, 3];
    c
}

#[test]
fn ablation_grid_shapes_and_job_independence() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = pipeline::ablate(&grid_cfg(), &a, 1).unwrap();
    pipeline::ablate(&grid_cfg(), &b, 3).unwrap();
    assert_eq!(ra.results.len(), 4);
    assert_eq!(lines(&a.join("ablation_runs.csv")).len(), 1 + 8);
    let table = lines(&a.join("ablation_table.csv"));
    assert_eq!(table[0], "row,L=2_mean,L=2_std,L=3_mean,L=3_std");
    assert_eq!(table.len(), 3);
    for f in ["ablation_runs.csv", "ablation_table.csv"] {
        assert_eq!(hash(&a.join(f)), hash(&b.join(f)), "{f}");
    }
}

#[test]
fn single_cell_matches_standalone_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let mut cfg = tiny();
    cfg.ablation.seeds = vec![7];
    cfg.ablation.target_multiple = 2.0;
    cfg.ablation.axes.filter_len = vec![2];
    pipeline::gen_data(&cfg, out).unwrap();
    cfg.dataset.path = Some(out.join("dataset.jsonl"));
    let grid = pipeline::ablate(&cfg, &out.join("grid"), 1).unwrap();

    let mut solo = cfg.clone();
    solo.seed = 7;
    solo.model.filter_len = 2;
    solo.eval.target_multiples = vec![2.0];
    pipeline::train(&solo, &out.join("solo"), false).unwrap();
    let rows = pipeline::eval(&solo, &out.join("solo"), None).unwrap();
    assert_eq!(grid.results[0].values, vec![rows[0].mean]);
}

#[test]
fn skipped_cells_are_logged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.updates = 2;
    cfg.ablation.axes.context_len = vec![1, 2];
    cfg.ablation.axes.filter_len = vec![3];
    let r = pipeline::ablate(&cfg, dir.path(), 2).unwrap();
    assert_eq!(r.results.len(), 1);
    assert_eq!(r.skipped.len(), 1);
    assert_eq!(lines(&dir.path().join("ablation_skipped.csv")).len(), 2);
}
