//! Experiment harness: synthetic data, dataset I/O, reference oracles,
//! configuration, reports and the self-check suite.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod oracle;
pub mod report;
pub mod selfcheck;
pub mod synthetic;

pub use config::{DataConfig, ExperimentConfig};
pub use dataset::{
    read_dataset_csv, read_embeddings_csv, read_point_set_csv, write_dataset_csv, write_embeddings_csv,
    write_point_set_csv, DomainData,
};
pub use experiment::{infer_classes, load_domains, run_experiment, ExperimentOutcome, CHECKPOINT_FILE, LOSS_FILE, METRICS_FILE};
pub use oracle::{kl_gaussian_quadrature, oracle_reference, oracle_reference_with, OracleKind, OracleOptions, OracleQuery};
pub use report::{LossMeans, LossSummary, MetricsReport};
pub use selfcheck::{run_selfcheck, CheckResult, SelfCheckOptions, SelfCheckReport};
pub use synthetic::{generate_synthetic, DomainTransform, SyntheticSpec};
