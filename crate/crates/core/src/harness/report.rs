//! Schema-versioned JSON metrics reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::losses::LossComponents;
use crate::train::{EvalMetrics, LossRecord};

pub const REPORT_SCHEMA: &str = "probalign-metrics";
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Component means over a window of iterations.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossMeans {
    pub components: LossComponents,
    pub total: f64,
}

impl LossMeans {
    pub fn of(records: &[LossRecord]) -> Self {
        if records.is_empty() {
            return Self::default();
        }
        let n = records.len() as f64;
        let mut c = LossComponents::default();
        let mut total = 0.0;
        for r in records {
            c.classification += r.components.classification;
            c.kl_extractor += r.components.kl_extractor;
            c.kl_classifier += r.components.kl_classifier;
            c.local += r.components.local;
            c.global += r.components.global;
            total += r.total;
        }
        c.classification /= n;
        c.kl_extractor /= n;
        c.kl_classifier /= n;
        c.local /= n;
        c.global /= n;
        Self {
            components: c,
            total: total / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub iterations: usize,
    /// Means over the first `ceil(n / 10)` iterations.
    pub first_decile: LossMeans,
    /// Means over the last `ceil(n / 10)` iterations.
    pub last_decile: LossMeans,
    pub last: Option<LossRecord>,
}

impl LossSummary {
    pub fn of(log: &[LossRecord]) -> Self {
        let w = log.len().div_ceil(10);
        Self {
            iterations: log.len(),
            first_decile: LossMeans::of(&log[..w]),
            last_decile: LossMeans::of(&log[log.len() - w..]),
            last: log.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub schema: String,
    pub schema_version: u32,
    pub library_version: String,
    pub seed: u64,
    pub held_out_domain: usize,
    pub n_classes: usize,
    pub metrics: EvalMetrics,
    pub loss_summary: LossSummary,
    pub config: ExperimentConfig,
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    pub fn new(
        config: &ExperimentConfig,
        n_classes: usize,
        metrics: EvalMetrics,
        log: &[LossRecord],
        wall_clock_seconds: f64,
    ) -> Self {
        Self {
            schema: REPORT_SCHEMA.to_owned(),
            schema_version: REPORT_SCHEMA_VERSION,
            library_version: crate::VERSION.to_owned(),
            seed: config.train.seed,
            held_out_domain: config.held_out_domain,
            n_classes,
            metrics,
            loss_summary: LossSummary::of(log),
            config: config.clone(),
            wall_clock_seconds,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::validation(format!("report encode: {e}")))
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        if r.schema != REPORT_SCHEMA || r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::parse(
                origin,
                format!("unsupported report schema {} v{}", r.schema, r.schema_version),
            ));
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Equality of everything except the wall-clock time.
    pub fn same_payload(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_clock_seconds: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}
