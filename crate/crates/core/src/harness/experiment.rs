//! End-to-end leave-one-domain-out experiments.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use super::config::ExperimentConfig;
use super::dataset::{read_dataset_csv, DomainData};
use super::report::MetricsReport;
use super::synthetic::generate_synthetic;
use crate::bayes_net::{save_checkpoint, Checkpoint, NetworkStack};
use crate::error::{Error, Result};
use crate::train::{save_loss_csv, train_lodo, LabeledDomain, LossRecord};

pub const METRICS_FILE: &str = "metrics.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "model.json";

/// Loads or generates every domain named by the config.
pub fn load_domains(cfg: &ExperimentConfig) -> Result<Vec<DomainData>> {
    match &cfg.data.synthetic {
        Some(spec) => generate_synthetic(spec),
        None => read_dataset_csv(&cfg.data.paths),
    }
}

/// Number of classes from the config, or one more than the largest label.
pub fn infer_classes(cfg: &ExperimentConfig, domains: &[DomainData]) -> Result<usize> {
    let max_label = domains.iter().flat_map(|d| d.labels.iter().copied()).max().unwrap_or(0);
    match cfg.n_classes {
        Some(m) if m <= max_label => Err(Error::validation(format!(
            "n_classes: {m} classes but the data contains label {max_label}"
        ))),
        Some(m) => Ok(m),
        None => Ok((max_label + 1).max(2)),
    }
}

pub struct ExperimentOutcome {
    pub report: MetricsReport,
    pub log: Vec<LossRecord>,
    pub model: NetworkStack,
    /// Files written, when an output directory was given.
    pub files: Vec<PathBuf>,
}

/// Trains on every domain but the held-out one, evaluates on it and,
/// if `out_dir` is given, writes the metrics report, the loss log and the
/// model checkpoint there.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let domains = load_domains(cfg)?;
    if cfg.held_out_domain >= domains.len() {
        return Err(Error::validation(format!(
            "held_out_domain: {} is out of range for {} domains",
            cfg.held_out_domain,
            domains.len()
        )));
    }
    let n_classes = infer_classes(cfg, &domains)?;
    let labeled = domains.iter().map(DomainData::to_labeled).collect::<Result<Vec<LabeledDomain>>>()?;
    let start = Instant::now();
    let (fit, metrics) = train_lodo(&cfg.train, &labeled, cfg.held_out_domain, n_classes)?;
    let elapsed = start.elapsed().as_secs_f64();
    info!(
        "held-out domain {}: accuracy {:.4} (majority {:.4}) in {:.2}s",
        cfg.held_out_domain, metrics.accuracy, metrics.majority_baseline, elapsed
    );
    let report = MetricsReport::new(cfg, n_classes, metrics, &fit.log, elapsed);
    let mut files = Vec::new();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics_path = dir.join(METRICS_FILE);
        report.save(&metrics_path)?;
        let loss_path = dir.join(LOSS_FILE);
        save_loss_csv(&fit.log, &loss_path)?;
        let ck_path = dir.join(CHECKPOINT_FILE);
        let arch = cfg.train.init.architecture(labeled[0].dim(), n_classes);
        save_checkpoint(&ck_path, &Checkpoint::new(arch, fit.model.clone()))?;
        files.extend([metrics_path, loss_path, ck_path]);
    }
    Ok(ExperimentOutcome {
        report,
        log: fit.log,
        model: fit.model,
        files,
    })
}
