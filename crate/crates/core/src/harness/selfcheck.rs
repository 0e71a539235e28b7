//! Built-in self-check suite.
//!
//! Compares every fast path against the brute-force oracles, checks the
//! Gaussian KL against quadrature, runs finite-difference gradient checks on
//! a toy model and probes a few structural properties (PSD Gram matrices,
//! zero global loss for identical domains).

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{
    kl_gaussian_quadrature, oracle_reference_with, OracleKind, OracleOptions, OracleQuery, MAX_DIM, MAX_POINTS,
    MAX_SAMPLES,
};
use super::synthetic::{generate_synthetic, DomainTransform, SyntheticSpec};
use crate::autodiff::{gaussian_kl_sum, softplus, softplus_inv};
use crate::bayes_net::{moped_init, BayesAffineLayer, DenseLayer, DEFAULT_SIGMA_FLOOR};
use crate::error::Result;
use crate::kernel::{gram_matrix, mmd2, KernelConfig, PointSet};
use crate::linalg::min_eigenvalue_symmetric;
use crate::prob_embedding::{
    global_alignment_loss, kme_inner, level2_gram, level2_kernel, pmmd2, GlobalMode, ProbEmbedding,
};
use crate::train::{
    finite_difference_check, initialize_model, iteration_batches, relative_error, Component, IterationDraws,
    LabeledDomain, TrainConfig,
};

pub const ORACLE_TOLERANCE: f64 = 1e-10;
pub const KL_TOLERANCE: f64 = 1e-6;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_FLOOR: f64 = 1e-6;
/// Most negative eigenvalue tolerated in a Gram matrix, per row.
pub const PSD_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckOptions {
    pub seed: u64,
    /// Random instances per oracle comparison.
    pub oracle_instances: usize,
    pub kl_instances: usize,
    /// Runs the oracle comparisons against a kernel with the sign of λ
    /// flipped, which must make the suite fail.
    pub corrupt_kernel: bool,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            oracle_instances: 200,
            kl_instances: 100,
            corrupt_kernel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub n_cases: usize,
    pub detail: String,
}

impl CheckResult {
    fn bounded(name: &str, max_error: f64, tolerance: f64, n_cases: usize, detail: String) -> Self {
        Self {
            name: name.to_owned(),
            passed: max_error <= tolerance,
            max_error,
            tolerance,
            n_cases,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckReport {
    pub options: SelfCheckOptions,
    pub checks: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// A random desk-size instance for the oracle comparisons.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub cfg: KernelConfig,
    pub x: PointSet,
    pub y: PointSet,
    pub dl: Vec<ProbEmbedding>,
    pub dt: Vec<ProbEmbedding>,
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
}

/// Draws bandwidths in `[0.25, 4]`, dimension up to the oracle caps and
/// points uniform in `[−1.5, 1.5]^d`.
pub fn random_oracle_instance(rng: &mut impl Rng) -> Result<OracleInstance> {
    let cfg = KernelConfig::new(rng.random_range(0.25..=4.0), rng.random_range(0.25..=4.0))?;
    let d = rng.random_range(1..=MAX_DIM);
    let (n, m) = (rng.random_range(2..=MAX_POINTS), rng.random_range(2..=MAX_POINTS));
    let x = PointSet::new(random_matrix(rng, n, d))?;
    let y = PointSet::new(random_matrix(rng, m, d))?;
    let t = rng.random_range(1..=MAX_SAMPLES);
    let mut domain = || -> Result<Vec<ProbEmbedding>> {
        let n = rng.random_range(2..=MAX_POINTS);
        (0..n).map(|_| ProbEmbedding::new(random_matrix(rng, t, d))).collect()
    };
    let dl = domain()?;
    let dt = domain()?;
    Ok(OracleInstance { cfg, x, y, dl, dt })
}

/// Fast-path value and oracle value of one comparison.
pub fn compare_with_oracle(inst: &OracleInstance, kind: OracleKind, opts: OracleOptions) -> Result<(f64, f64)> {
    let cfg = &inst.cfg;
    let (a, b) = (&inst.dl[0], &inst.dt[0]);
    Ok(match kind {
        OracleKind::Mmd2 => (
            mmd2(cfg, &inst.x, &inst.y)?,
            oracle_reference_with(OracleQuery::Mmd2 { cfg, x: &inst.x, y: &inst.y }, opts)?,
        ),
        OracleKind::KmeInner => (
            kme_inner(cfg, a, b)?,
            oracle_reference_with(OracleQuery::KmeInner { cfg, a, b }, opts)?,
        ),
        OracleKind::Level2 => (
            level2_kernel(cfg, a, b)?,
            oracle_reference_with(OracleQuery::Level2 { cfg, a, b }, opts)?,
        ),
        OracleKind::Pmmd2 => (
            pmmd2(cfg, &inst.dl, &inst.dt)?,
            oracle_reference_with(OracleQuery::Pmmd2 { cfg, dl: &inst.dl, dt: &inst.dt }, opts)?,
        ),
        OracleKind::KlGaussian => unreachable!("KL has its own check"),
    })
}

fn oracle_checks(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let oracle_opts = OracleOptions {
        flip_lambda_sign: opts.corrupt_kernel,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let instances = (0..opts.oracle_instances)
        .map(|_| random_oracle_instance(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    let kinds = [
        (OracleKind::Mmd2, "oracle_mmd2"),
        (OracleKind::KmeInner, "oracle_kme_inner"),
        (OracleKind::Level2, "oracle_level2_kernel"),
        (OracleKind::Pmmd2, "oracle_pmmd2"),
    ];
    let mut out = Vec::new();
    for (kind, name) in kinds {
        let mut worst = (0.0f64, String::new());
        for (i, inst) in instances.iter().enumerate() {
            let (fast, reference) = compare_with_oracle(inst, kind, oracle_opts)?;
            let err = relative_error(fast, reference, f64::MIN_POSITIVE);
            // NaN from a corrupted kernel must count as a failure.
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err > worst.0 || (i == 0 && worst.1.is_empty()) {
                worst = (err, format!("instance {i}: fast {fast:e}, oracle {reference:e}"));
            }
        }
        out.push(CheckResult::bounded(name, worst.0, ORACLE_TOLERANCE, instances.len(), worst.1));
    }
    Ok(out)
}

fn kl_checks(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4b4c);
    let mut worst = (0.0f64, String::new());
    for i in 0..opts.kl_instances {
        let mu_q = rng.random_range(-2.0..2.0);
        let mu_p = rng.random_range(-2.0..2.0);
        let rho = softplus_inv(rng.random_range(0.2..2.0));
        let sigma_p = rng.random_range(0.2..2.0);
        let closed = gaussian_kl_sum(
            &Array2::from_elem((1, 1), mu_q),
            &Array2::from_elem((1, 1), rho),
            &Array2::from_elem((1, 1), mu_p),
            &Array2::from_elem((1, 1), sigma_p),
        );
        let quad = kl_gaussian_quadrature(mu_q, softplus(rho), mu_p, sigma_p)?;
        let err = (closed - quad).abs();
        if err >= worst.0 {
            worst = (err, format!("tuple {i}: closed form {closed:e}, quadrature {quad:e}"));
        }
    }
    let kl = CheckResult::bounded("kl_quadrature", worst.0, KL_TOLERANCE, opts.kl_instances, worst.1);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4d4f);
    let dense = DenseLayer::init(6, 4, &mut rng);
    let layer = BayesAffineLayer::from_dense(&dense, 1e-3, 1.0)?;
    let moped = moped_init(&layer, &dense, 0.1, DEFAULT_SIGMA_FLOOR)?;
    let moped_kl = moped.kl();
    let moped = CheckResult {
        name: "moped_kl_zero".to_owned(),
        passed: moped_kl == 0.0,
        max_error: moped_kl.abs(),
        tolerance: 0.0,
        n_cases: 1,
        detail: format!("KL at MOPED initialization {moped_kl:e}"),
    };
    Ok(vec![kl, moped])
}

fn toy_sources(seed: u64) -> Result<Vec<LabeledDomain>> {
    let spec = SyntheticSpec {
        n_classes: 3,
        dim: 3,
        samples_per_domain: 12,
        domains: vec![DomainTransform::default(), DomainTransform {
            rotation: 0.5,
            ..DomainTransform::default()
        }],
        separation: 2.0,
        noise_sigma: 0.3,
        seed,
    };
    generate_synthetic(&spec)?.iter().map(|d| d.to_labeled()).collect()
}

/// Small model settings used by the gradient checks.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.batch_per_domain = 4;
    cfg.weights.t_passes = 3;
    cfg.n_pairs = 4;
    cfg.init.pretrain_iterations = 20;
    cfg.init.backbone = vec![8];
    cfg.init.latent_dim = 6;
    cfg.init.metric_hidden = vec![6];
    cfg.init.metric_out = 4;
    cfg
}

fn component_name(c: Component) -> &'static str {
    match c {
        Component::Classification => "classification",
        Component::KlExtractor => "kl_extractor",
        Component::KlClassifier => "kl_classifier",
        Component::LocalPositive => "local_positive",
        Component::LocalNegative => "local_negative",
        Component::Global => "global",
        Component::Total => "total",
    }
}

fn gradient_checks(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let sources = toy_sources(opts.seed)?;
    let mut out = Vec::new();
    for (mode, tag) in [(GlobalMode::Quadratic, "quadratic"), (GlobalMode::Linear, "linear")] {
        let mut cfg = toy_train_config(opts.seed);
        cfg.global_mode = mode;
        let model = initialize_model(&cfg, &sources, 3)?;
        let batches = iteration_batches(&cfg, &sources, 0)?;
        let draws = IterationDraws::draw(&cfg, &model, &batches, 0)?;
        // The weighted total is linear in the components and adds no coverage.
        for c in Component::ALL.into_iter().filter(|&c| c != Component::Total) {
            let r = finite_difference_check(&cfg, &model, &batches, &draws, c, GRADIENT_STEP, GRADIENT_FLOOR)?;
            let name = format!("gradient_{tag}_{}", component_name(c));
            out.push(CheckResult::bounded(&name, r.max_rel_error, GRADIENT_TOLERANCE, r.n_checked, r.worst));
        }
    }
    Ok(out)
}

fn psd_checks(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x505344);
    let mut worst_l1 = 0.0f64;
    let mut worst_l2 = 0.0f64;
    let cases = 20;
    for _ in 0..cases {
        let inst = random_oracle_instance(&mut rng)?;
        let g = gram_matrix(&inst.cfg, &inst.x, &inst.x)?;
        worst_l1 = worst_l1.max(-min_eigenvalue_symmetric(&g) / g.nrows() as f64);
        let all: Vec<ProbEmbedding> = inst.dl.iter().chain(&inst.dt).cloned().collect();
        let g2 = level2_gram(&inst.cfg, &all)?;
        worst_l2 = worst_l2.max(-min_eigenvalue_symmetric(&g2) / g2.nrows() as f64);
    }
    Ok(vec![
        CheckResult::bounded(
            "psd_level1_gram",
            worst_l1.max(0.0),
            PSD_SLACK,
            cases,
            "most negative eigenvalue per row".to_owned(),
        ),
        CheckResult::bounded(
            "psd_level2_gram",
            worst_l2.max(0.0),
            PSD_SLACK,
            cases,
            "most negative eigenvalue per row".to_owned(),
        ),
    ])
}

/// Identical domains give exactly zero global loss; a unit shift of one
/// domain gives a strictly positive one.
fn identical_domain_checks(opts: &SelfCheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1d);
    let cfg = KernelConfig::default();
    let cases = 50;
    let mut max_identical = 0.0f64;
    let mut min_shifted = f64::INFINITY;
    for _ in 0..cases {
        let base: Vec<ProbEmbedding> = (0..5)
            .map(|_| ProbEmbedding::new(random_matrix(&mut rng, 4, 3)))
            .collect::<Result<_>>()?;
        let same = vec![base.clone(), base.clone(), base.clone()];
        max_identical = max_identical.max(global_alignment_loss(&cfg, &same, GlobalMode::Quadratic, &mut rng)?.abs());
        let shifted: Vec<ProbEmbedding> = base
            .iter()
            .map(|e| ProbEmbedding::new(e.samples().mapv(|v| v + 1.0)))
            .collect::<Result<_>>()?;
        let mixed = vec![base.clone(), base.clone(), shifted];
        min_shifted = min_shifted.min(global_alignment_loss(&cfg, &mixed, GlobalMode::Quadratic, &mut rng)?);
    }
    Ok(vec![
        CheckResult {
            name: "identical_domains_zero".to_owned(),
            passed: max_identical == 0.0,
            max_error: max_identical,
            tolerance: 0.0,
            n_cases: cases,
            detail: format!("largest |L_global| for identical domains {max_identical:e}"),
        },
        CheckResult {
            name: "shifted_domain_positive".to_owned(),
            passed: min_shifted > 1e-6,
            max_error: 0.0,
            tolerance: 1e-6,
            n_cases: cases,
            detail: format!("smallest L_global with one shifted domain {min_shifted:e}"),
        },
    ])
}

pub fn run_selfcheck(opts: &SelfCheckOptions) -> Result<SelfCheckReport> {
    let mut checks = oracle_checks(opts)?;
    checks.extend(kl_checks(opts)?);
    checks.extend(gradient_checks(opts)?);
    checks.extend(psd_checks(opts)?);
    checks.extend(identical_domain_checks(opts)?);
    Ok(SelfCheckReport { options: *opts, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let r = run_selfcheck(&SelfCheckOptions {
            oracle_instances: 40,
            kl_instances: 20,
            ..SelfCheckOptions::default()
        })
        .unwrap();
        let failures: Vec<_> = r.failures().collect();
        assert!(failures.is_empty(), "{failures:#?}");
    }

    #[test]
    fn corrupted_kernel_is_detected() {
        let opts = SelfCheckOptions {
            oracle_instances: 20,
            corrupt_kernel: true,
            ..SelfCheckOptions::default()
        };
        let checks = oracle_checks(&opts).unwrap();
        assert!(checks.iter().all(|c| !c.passed), "{checks:#?}");
    }
}
