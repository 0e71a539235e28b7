//! Probabilistic domain alignment.
//!
//! Building blocks for learning domain-invariant representations from
//! probabilistic embeddings:
//!
//! * [`kernel`]: level-1 Gaussian RBF kernel, Gram matrices, point-set MMD.
//! * [`prob_embedding`]: Monte Carlo embedding clouds, the level-2 kernel,
//!   P-MMD (quadratic and linear-time) and the global alignment loss.
//! * [`bayes_net`]: mean-field Gaussian Bayesian affine layers with MOPED
//!   priors, stochastic forward passes, KL terms and the metric network.
//! * [`losses`]: classification losses, probabilistic contrastive alignment,
//!   cross-domain pair sampling and the total objective.
//! * [`train`]: reverse-mode gradients, Adam, the training loop and
//!   leave-one-domain-out evaluation.
//! * [`harness`]: synthetic multi-domain data, reference oracles,
//!   experiment configuration, reports and the self-check suite.

pub mod autodiff;
pub mod bayes_net;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod losses;
pub mod prob_embedding;
pub mod rng;
pub mod train;

pub use bayes_net::{load_checkpoint, save_checkpoint, Architecture, Checkpoint, NetworkStack};
pub use error::{Error, Result};
pub use harness::{
    generate_synthetic, run_experiment, run_selfcheck, ExperimentConfig, MetricsReport, SelfCheckOptions,
    SyntheticSpec,
};
pub use kernel::{gram_matrix, mmd2, rbf_kernel, Estimator, KernelConfig, PointSet};
pub use prob_embedding::{
    global_alignment_loss, kme_inner, level2_kernel, mean_embedding_mmd2, pmmd2, pmmd2_linear,
    DomainEmbeddings, GlobalMode, LinearPairing, ProbEmbedding,
};
pub use losses::{LossComponents, LossWeights};
pub use train::{evaluate_lodo, fit, train_lodo, Ablation, EvalMetrics, LabeledDomain, TrainConfig};

/// Library version recorded in reports and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
