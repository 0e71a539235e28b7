//! Experiment configuration files (TOML).
//!
//! Every field has a default and unknown keys are rejected. A minimal file
//! can be empty, which selects the `shift3` synthetic task.
//!
//! ```toml
//! held_out_domain = 3
//!
//! [data.synthetic]
//! seed = 7
//!
//! [train]
//! learning_rate = 1e-3
//! iterations = 300
//!
//! [train.weights]
//! beta1 = 0.1
//! beta2 = 0.7
//!
//! [train.ablation]
//! disable_local = true
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticSpec;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Where the domains come from. Exactly one source must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Dataset CSV files, one per domain or combined.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticSpec::shift3()),
            paths: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Index (domain id order) of the target domain.
    pub held_out_domain: usize,
    /// Number of classes; inferred from the data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            held_out_domain: 3,
            n_classes: None,
        }
    }
}

impl ExperimentConfig {
    /// The `shift3` task with the settings used for desk-scale runs:
    /// batch 32 per domain, learning rate 5e-3, 400 iterations.
    pub fn shift3(seed: u64) -> Self {
        let mut cfg = Self::default();
        cfg.train.seed = seed;
        cfg.train.batch_per_domain = 32;
        cfg.train.learning_rate = 5e-3;
        cfg.train.iterations = 400;
        cfg
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in &mut cfg.data.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::validation(format!("config encode: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, self.data.paths.is_empty()) {
            (Some(spec), true) => {
                spec.validate().map_err(|e| e.in_field("data.synthetic"))?;
                if self.held_out_domain >= spec.n_domains() {
                    return Err(Error::validation(format!(
                        "held_out_domain: {} is out of range for {} domains",
                        self.held_out_domain,
                        spec.n_domains()
                    )));
                }
                if let Some(m) = self.n_classes {
                    if m != spec.n_classes {
                        return Err(Error::validation("n_classes: disagrees with data.synthetic.n_classes"));
                    }
                }
            }
            (None, false) => {}
            _ => return Err(Error::validation("data: exactly one of `synthetic` or `paths` must be set")),
        }
        if matches!(self.n_classes, Some(m) if m < 2) {
            return Err(Error::validation("n_classes: need at least two classes"));
        }
        self.train.validate().map_err(|e| e.in_field("train"))
    }

    /// Applies a comma-separated ablation flag list.
    pub fn apply_ablation(&mut self, flags: &str) -> Result<()> {
        self.train.ablation.apply_flags(flags).map_err(|e| e.in_field("ablation"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_file_is_the_default_task() {
        assert_eq!(parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn nested_fields_and_round_trip() {
        let cfg = parse(
            "held_out_domain = 1\n[train]\nlearning_rate = 0.001\nseed = 9\n[train.weights]\nbeta2 = 0.5\n[train.ablation]\ndisable_local = true\n[data.synthetic]\nseed = 4\n",
        )
        .unwrap();
        assert_eq!(cfg.held_out_domain, 1);
        assert_eq!(cfg.train.weights.beta2, 0.5);
        assert_eq!(cfg.train.weights.beta1, 0.1);
        assert!(cfg.train.ablation.disable_local);
        assert_eq!(cfg.data.synthetic.as_ref().unwrap().seed, 4);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_fail_fast() {
        let err = parse("[train]\nlearnin_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("learnin_rate"), "{err}");
    }

    #[test]
    fn validation_names_the_field() {
        let err = parse("[train.weights]\nbeta1 = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("train.weights.beta1"), "{err}");
        let err = parse("[train.kernel]\nlambda2 = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("train.kernel.lambda2"), "{err}");
        let err = parse("held_out_domain = 4\n").unwrap_err();
        assert!(err.to_string().contains("held_out_domain"), "{err}");
        let err = parse("[data.synthetic]\ndim = 1\n").unwrap_err();
        assert!(err.to_string().contains("data.synthetic.dim"), "{err}");
        let err = parse("[data]\npaths = [\"a.csv\"]\n[data.synthetic]\n").unwrap_err();
        assert!(err.to_string().contains("data:"), "{err}");
    }

    #[test]
    fn ablation_flags_apply() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_ablation("disable_global,mean_embedding").unwrap();
        assert!(cfg.train.ablation.disable_global);
        assert!(cfg.apply_ablation("nope").is_err());
    }
}
