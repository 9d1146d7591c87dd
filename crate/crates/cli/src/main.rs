//! `dconv` command line: gen-data, train, eval, analyze, ablate.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure during
//! training, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dconv::pipeline::{self, load_config, PipelineError, RunConfig};

/// Default output root when neither `--out` nor the config's `out` is set.
const OUT_ENV: &str = "DCONV_OUT";

#[derive(Parser)]
#[command(name = "dconv", version, about = "Convolution-mixer action predictors for offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out`, then
    /// `$DCONV_OUT/<config name>`, then `runs/<config name>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behavior policies and write dataset.jsonl.
    GenData(Common),
    /// Train and write model_final.ckpt, model_best.ckpt and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from model_final.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint at the configured targets into eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Attention maps, bandedness, filters, modal zero-out and target sweep.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and score every cell of the configured ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    if let Some(o) = &cfg.out {
        return o.clone();
    }
    let stem = common
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => Path::new(&root).join(stem),
        _ => Path::new("runs").join(stem),
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let common = match &cli.command {
        Command::GenData(c) => c,
        Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Analyze { common, .. }
        | Command::Ablate { common, .. } => common,
    };
    let cfg = load_config(&common.config).map_err(|e| match e {
        PipelineError::Io { path, source } => {
            PipelineError::Config(format!("cannot read config {}: {source}", path.display()))
        }
        e => e,
    })?;
    let out = out_dir(common, &cfg);
    match &cli.command {
        Command::GenData(_) => {
            let r = pipeline::gen_data(&cfg, &out)?;
            println!("wrote {}", r.path.display());
            println!("episodes {} steps {}", r.episodes, r.steps);
            println!(
                "returns max {} min {} mean {}",
                r.returns.max, r.returns.min, r.returns.mean
            );
        }
        Command::Train { resume, .. } => {
            let r = pipeline::train(&cfg, &out, *resume)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("updates {}", r.step);
            if let Some(l) = r.final_loss {
                println!("final loss {l}");
            }
            if let Some((u, v)) = r.best {
                println!("best mean return {v} at update {u}");
            }
            println!("elapsed {:.1}s", r.elapsed.as_secs_f64());
            println!("outputs in {}", out.display());
        }
        Command::Eval { checkpoint, .. } => {
            for r in pipeline::eval(&cfg, &out, checkpoint.as_deref())? {
                println!("target {} mean {} std {}", r.target, r.mean, r.std);
            }
        }
        Command::Analyze { checkpoint, .. } => {
            let r = pipeline::analyze(&cfg, &out, checkpoint.as_deref())?;
            for n in &r.notes {
                eprintln!("note: {n}");
            }
            for (map, score) in &r.bandedness {
                println!("bandedness {map} {score}");
            }
            for f in &r.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Ablate { jobs, .. } => {
            let r = pipeline::ablate(&cfg, &out, *jobs)?;
            for (cell, why) in &r.skipped {
                eprintln!("skipped {cell}: {why}");
            }
            for res in &r.results {
                println!("{} mean {} std {}", res.cell.descriptor(), res.mean, res.std);
            }
            println!("table pivoted on {} in {}", r.pivot, out.join("ablation_table.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
