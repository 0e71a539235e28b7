//! `probalign` command-line tool.
//!
//! Log verbosity is controlled by `PROBALIGN_LOG` (e.g. `info`, `debug`);
//! it never changes results.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use probalign::harness::{read_embeddings_csv, read_point_set_csv, write_dataset_csv};
use probalign::prob_embedding::pmmd2_linear;
use probalign::rng::{stream, Stream};
use probalign::{
    evaluate_lodo, generate_synthetic, load_checkpoint, mmd2, pmmd2, run_experiment, run_selfcheck, Estimator,
    ExperimentConfig, GlobalMode, SelfCheckOptions,
};
use serde_json::json;

const LOG_ENV: &str = "PROBALIGN_LOG";

#[derive(Parser)]
#[command(name = "probalign", version, about = "Probabilistic domain alignment experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the shift3 synthetic task.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed (and the data seed for generate-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Comma-separated ablation flags: mean_embedding, mean_csa,
    /// disable_local, disable_global, deterministic_mode.
    #[arg(long, global = true, value_name = "FLAG-LIST")]
    ablation: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the configured synthetic domains to `<out-dir>/data.csv`.
    GenerateData,
    /// Trains on the source domains, evaluates on the held-out one and
    /// writes metrics.json, loss.csv and model.json.
    Train,
    /// Evaluates a saved checkpoint on the held-out domain.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Point-set MMD² between two CSV files.
    Mmd {
        x: PathBuf,
        y: PathBuf,
        /// Use the unbiased (diagonal-excluding) estimator.
        #[arg(long)]
        unbiased: bool,
    },
    /// P-MMD² between two embedding CSV files.
    Pmmd {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        unbiased: bool,
        /// Linear-time estimator with a pairing drawn from `--seed`.
        #[arg(long)]
        linear: bool,
    },
    /// Runs the built-in self-check suite; exits nonzero on any failure.
    Selfcheck {
        /// Compares against a deliberately wrong kernel (must fail).
        #[arg(long)]
        corrupt_kernel: bool,
        #[arg(long, default_value_t = 200)]
        instances: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::shift3(0),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(flags) = &common.ablation {
        cfg.apply_ablation(flags)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    common.out_dir.as_deref().context("--out-dir is required for this command")
}

fn write_json(dir: Option<&Path>, name: &str, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(name);
        std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
        info!("wrote {}", path.display());
    }
    println!("{text}");
    Ok(())
}

fn kernel(cfg: &ExperimentConfig, unbiased: bool) -> probalign::KernelConfig {
    let k = cfg.train.kernel;
    if unbiased {
        k.with_estimator(Estimator::UnbiasedUStatistic)
    } else {
        k
    }
}

fn run(cli: Cli) -> Result<bool> {
    let common = &cli.common;
    match cli.command {
        Command::GenerateData => {
            let mut cfg = load_config(common)?;
            let Some(spec) = cfg.data.synthetic.as_mut() else {
                bail!("generate-data needs a [data.synthetic] section, not dataset paths");
            };
            if let Some(seed) = common.seed {
                spec.seed = seed;
            }
            let domains = generate_synthetic(spec)?;
            let dir = out_dir(common)?;
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("data.csv");
            write_dataset_csv(&path, &domains)?;
            println!("{}", json!({ "path": path, "domains": domains.len(), "samples": domains.iter().map(|d| d.len()).sum::<usize>() }));
        }
        Command::Train => {
            let cfg = load_config(common)?;
            let out = run_experiment(&cfg, common.out_dir.as_deref())?;
            let m = &out.report.metrics;
            println!(
                "{}",
                json!({
                    "accuracy": m.accuracy,
                    "majority_baseline": m.majority_baseline,
                    "mean_entropy": m.mean_entropy,
                    "iterations": out.log.len(),
                    "files": out.files,
                })
            );
        }
        Command::Evaluate { checkpoint } => {
            let cfg = load_config(common)?;
            let ck = load_checkpoint(&checkpoint)?;
            let domains = probalign::harness::load_domains(&cfg)?;
            let labeled = domains.iter().map(|d| d.to_labeled()).collect::<probalign::Result<Vec<_>>>()?;
            let metrics = evaluate_lodo(&cfg.train, &ck.network, &labeled, cfg.held_out_domain)?;
            write_json(common.out_dir.as_deref(), "eval.json", &serde_json::to_value(metrics)?)?;
        }
        Command::Mmd { x, y, unbiased } => {
            let cfg = load_config(common)?;
            let k = kernel(&cfg, unbiased);
            let (xs, ys) = (read_point_set_csv(&x)?, read_point_set_csv(&y)?);
            let v = mmd2(&k, &xs, &ys)?;
            write_json(common.out_dir.as_deref(), "mmd.json", &json!({ "mmd2": v, "kernel": k, "n_x": xs.len(), "n_y": ys.len() }))?;
        }
        Command::Pmmd { a, b, unbiased, linear } => {
            let cfg = load_config(common)?;
            let k = kernel(&cfg, unbiased);
            let (da, db) = (read_embeddings_csv(&a)?, read_embeddings_csv(&b)?);
            let (v, mode) = if linear {
                let mut rng = stream(cfg.train.seed, Stream::LinearPairing, &[]);
                (pmmd2_linear(&k, &da, &db, &mut rng)?, GlobalMode::Linear)
            } else {
                (pmmd2(&k, &da, &db)?, GlobalMode::Quadratic)
            };
            write_json(
                common.out_dir.as_deref(),
                "pmmd.json",
                &json!({ "pmmd2": v, "mode": mode, "kernel": k, "n_a": da.len(), "n_b": db.len() }),
            )?;
        }
        Command::Selfcheck { corrupt_kernel, instances } => {
            let opts = SelfCheckOptions {
                seed: common.seed.unwrap_or(0),
                oracle_instances: instances,
                corrupt_kernel,
                ..SelfCheckOptions::default()
            };
            let report = run_selfcheck(&opts)?;
            for c in &report.checks {
                eprintln!(
                    "{} {:<36} max error {:.3e} (tolerance {:.1e}, {} cases)",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.max_error,
                    c.tolerance,
                    c.n_cases
                );
            }
            write_json(common.out_dir.as_deref(), "selfcheck.json", &serde_json::to_value(&report)?)?;
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
