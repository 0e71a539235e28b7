//! Probabilistic embeddings and the level-2 kernel MMD between domains.
//!
//! A [`ProbEmbedding`] is one data point's latent distribution, materialized
//! as `T` Monte Carlo samples (rows). A domain is a list of such embeddings,
//! i.e. an empirical distribution over distributions. Comparing two domains
//! goes through two kernels:
//!
//! * the level-1 RBF kernel `k` on latent vectors, whose empirical mean maps
//!   give `⟨μ_A, μ_B⟩ = (1 / T_A T_B) Σ_ij k(a_i, b_j)`;
//! * the level-2 RBF kernel on mean embeddings,
//!   `K(A, B) = exp(-(λ₂/2) (⟨μ_A, μ_A⟩ − 2⟨μ_A, μ_B⟩ + ⟨μ_B, μ_B⟩))`.
//!
//! P-MMD is then the ordinary plug-in MMD over the members of two domains
//! with `K` in place of a point kernel.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{block_sum, mmd2, Estimator, KernelConfig, PointSet};

/// `T` Monte Carlo draws of one data point's latent distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbEmbedding {
    samples: Array2<f64>,
}

impl ProbEmbedding {
    pub fn new(samples: Array2<f64>) -> Result<Self> {
        if samples.nrows() == 0 {
            return Err(Error::validation("probabilistic embedding needs T >= 1 samples"));
        }
        if samples.ncols() == 0 {
            return Err(Error::validation("probabilistic embedding needs dimension >= 1"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("probabilistic embedding has non-finite samples"));
        }
        Ok(Self { samples })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(PointSet::from_rows(rows)?.into_inner())
    }

    /// Number of Monte Carlo samples `T`.
    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.samples.view()
    }

    /// Monte Carlo mean `E[Π]`.
    pub fn mean(&self) -> Array1<f64> {
        self.samples
            .mean_axis(Axis(0))
            .expect("embedding has at least one sample")
    }
}

/// The embeddings of one domain, with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEmbeddings {
    members: Vec<ProbEmbedding>,
    labels: Vec<usize>,
}

impl DomainEmbeddings {
    pub fn new(members: Vec<ProbEmbedding>, labels: Vec<usize>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::validation("domain must contain at least one embedding"));
        }
        if members.len() != labels.len() {
            return Err(Error::shape("DomainEmbeddings labels", members.len(), labels.len()));
        }
        check_common_dim(&members)?;
        Ok(Self { members, labels })
    }

    pub fn members(&self) -> &[ProbEmbedding] {
        &self.members
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }
}

fn check_common_dim(members: &[ProbEmbedding]) -> Result<usize> {
    let d = members.first().map(ProbEmbedding::dim).unwrap_or(0);
    for m in members {
        if m.dim() != d {
            return Err(Error::shape("embedding dimension", d, m.dim()));
        }
    }
    Ok(d)
}

/// Empirical inner product of the level-1 mean embeddings of `a` and `b`.
pub fn kme_inner(cfg: &KernelConfig, a: &ProbEmbedding, b: &ProbEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("kme_inner", a.dim(), b.dim()));
    }
    Ok(kme_raw(cfg.lambda1, a.samples(), b.samples()))
}

#[inline]
pub(crate) fn kme_raw(lambda1: f64, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let (s, _) = block_sum(lambda1, a, b);
    s / (a.nrows() * b.nrows()) as f64
}

/// Level-2 RBF from the three mean-embedding inner products.
#[inline]
pub(crate) fn level2_from_inner(lambda2: f64, aa: f64, ab: f64, bb: f64) -> f64 {
    let dist = (aa - 2.0 * ab + bb).max(0.0);
    (-(0.5 * lambda2) * dist).exp()
}

/// Level-2 kernel `K(Π_A, Π_B)` between two probabilistic embeddings.
pub fn level2_kernel(cfg: &KernelConfig, a: &ProbEmbedding, b: &ProbEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("level2_kernel", a.dim(), b.dim()));
    }
    let aa = kme_raw(cfg.lambda1, a.samples(), a.samples());
    let bb = kme_raw(cfg.lambda1, b.samples(), b.samples());
    let ab = kme_raw(cfg.lambda1, a.samples(), b.samples());
    Ok(level2_from_inner(cfg.lambda2, aa, ab, bb))
}

/// Full (not mirrored) level-2 Gram block between two lists, reusing
/// precomputed self inner products.
fn level2_block(
    cfg: &KernelConfig,
    xs: &[ProbEmbedding],
    x_self: &[f64],
    ys: &[ProbEmbedding],
    y_self: &[f64],
) -> Array2<f64> {
    let mut out = Array2::zeros((xs.len(), ys.len()));
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            let ab = kme_raw(cfg.lambda1, x.samples(), y.samples());
            out[[i, j]] = level2_from_inner(cfg.lambda2, x_self[i], ab, y_self[j]);
        }
    }
    out
}

fn self_inner(cfg: &KernelConfig, xs: &[ProbEmbedding]) -> Vec<f64> {
    xs.iter()
        .map(|x| kme_raw(cfg.lambda1, x.samples(), x.samples()))
        .collect()
}

/// Level-2 Gram matrix over a list of embeddings.
pub fn level2_gram(cfg: &KernelConfig, xs: &[ProbEmbedding]) -> Result<Array2<f64>> {
    check_common_dim(xs)?;
    let s = self_inner(cfg, xs);
    Ok(level2_block(cfg, xs, &s, xs, &s))
}

fn check_domain_pair(dl: &[ProbEmbedding], dt: &[ProbEmbedding]) -> Result<()> {
    if dl.is_empty() || dt.is_empty() {
        return Err(Error::validation("P-MMD requires non-empty domains"));
    }
    let dl_dim = check_common_dim(dl)?;
    let dt_dim = check_common_dim(dt)?;
    if dl_dim != dt_dim {
        return Err(Error::shape("pmmd2 domains", dl_dim, dt_dim));
    }
    Ok(())
}

/// Combines within/cross level-2 sums into an MMD estimate.
fn combine(
    estimator: Estimator,
    (sll, tll, nl): (f64, f64, f64),
    (stt, ttt, nt): (f64, f64, f64),
    slt: f64,
) -> f64 {
    match estimator {
        Estimator::BiasedVStatistic => {
            let v = sll / (nl * nl) + stt / (nt * nt) - 2.0 * slt / (nl * nt);
            if (-1e-12..0.0).contains(&v) {
                0.0
            } else {
                v
            }
        }
        Estimator::UnbiasedUStatistic => {
            (sll - tll) / (nl * (nl - 1.0)) + (stt - ttt) / (nt * (nt - 1.0)) - 2.0 * slt / (nl * nt)
        }
    }
}

/// Squared P-MMD between two domains of probabilistic embeddings.
///
/// Uses the plug-in weighting by default; `cfg.estimator =
/// UnbiasedUStatistic` drops the `i = i'` terms, which is the target the
/// linear-time estimator is unbiased for.
pub fn pmmd2(cfg: &KernelConfig, dl: &[ProbEmbedding], dt: &[ProbEmbedding]) -> Result<f64> {
    check_domain_pair(dl, dt)?;
    if cfg.estimator == Estimator::UnbiasedUStatistic && (dl.len() < 2 || dt.len() < 2) {
        return Err(Error::validation(
            "unbiased P-MMD requires at least two embeddings per domain",
        ));
    }
    let sl = self_inner(cfg, dl);
    let st = self_inner(cfg, dt);
    let kll = level2_block(cfg, dl, &sl, dl, &sl);
    let ktt = level2_block(cfg, dt, &st, dt, &st);
    let klt = level2_block(cfg, dl, &sl, dt, &st);
    Ok(combine(
        cfg.estimator,
        (kll.sum(), kll.diag().sum(), dl.len() as f64),
        (ktt.sum(), ktt.diag().sum(), dt.len() as f64),
        klt.sum(),
    ))
}

/// Index pairs `(i, i')` with `i != i'` drawn for the linear-time estimator,
/// one list per domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearPairing {
    pub left: Vec<(usize, usize)>,
    pub right: Vec<(usize, usize)>,
}

impl LinearPairing {
    /// Draws `min(n_l, n_t)` distinct-index pairs per domain, with replacement
    /// across pairs.
    pub fn draw(n_l: usize, n_t: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_l < 2 || n_t < 2 {
            return Err(Error::validation(
                "linear P-MMD requires at least two embeddings per domain",
            ));
        }
        let n = n_l.min(n_t);
        let mut draw = |size: usize| -> Vec<(usize, usize)> {
            (0..n)
                .map(|_| {
                    let i = rng.random_range(0..size);
                    // uniform over the other size - 1 indices
                    let mut j = rng.random_range(0..size - 1);
                    if j >= i {
                        j += 1;
                    }
                    (i, j)
                })
                .collect()
        };
        let left = draw(n_l);
        let right = draw(n_t);
        Ok(Self { left, right })
    }
}

/// Linear-time P-MMD estimate from an explicit pairing.
///
/// Each pair contributes
/// `K(l_i, l_i') + K(t_j, t_j') − K(l_i, t_j') − K(l_i', t_j)` and the
/// estimate is their mean. Its expectation over pairings is the unbiased
/// quadratic estimate.
pub fn pmmd2_linear_with(
    cfg: &KernelConfig,
    dl: &[ProbEmbedding],
    dt: &[ProbEmbedding],
    pairing: &LinearPairing,
) -> Result<f64> {
    check_domain_pair(dl, dt)?;
    if pairing.left.is_empty() || pairing.left.len() != pairing.right.len() {
        return Err(Error::validation("linear pairing must have equal, non-zero lengths"));
    }
    let in_range = |pairs: &[(usize, usize)], n: usize| pairs.iter().all(|&(a, b)| a < n && b < n);
    if !in_range(&pairing.left, dl.len()) || !in_range(&pairing.right, dt.len()) {
        return Err(Error::validation("linear pairing index out of range"));
    }
    let k = |a: &ProbEmbedding, b: &ProbEmbedding| level2_kernel(cfg, a, b);
    let mut total = 0.0;
    for (&(i, i2), &(j, j2)) in pairing.left.iter().zip(&pairing.right) {
        total += k(&dl[i], &dl[i2])? + k(&dt[j], &dt[j2])? - k(&dl[i], &dt[j2])? - k(&dl[i2], &dt[j])?;
    }
    Ok(total / pairing.left.len() as f64)
}

/// Linear-time P-MMD estimate with a freshly drawn pairing.
pub fn pmmd2_linear(
    cfg: &KernelConfig,
    dl: &[ProbEmbedding],
    dt: &[ProbEmbedding],
    rng: &mut impl Rng,
) -> Result<f64> {
    let pairing = LinearPairing::draw(dl.len(), dt.len(), rng)?;
    pmmd2_linear_with(cfg, dl, dt, &pairing)
}

/// How the pairwise domain discrepancies of the global loss are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    #[default]
    Quadratic,
    Linear,
}

/// Global alignment loss `(1/K²) Σ_{i,j} P-MMD²(D_i, D_j)` over all ordered
/// domain pairs (the `i = j` terms are zero).
pub fn global_alignment_loss(
    cfg: &KernelConfig,
    domains: &[Vec<ProbEmbedding>],
    mode: GlobalMode,
    rng: &mut impl Rng,
) -> Result<f64> {
    let k = domains.len();
    if k < 2 {
        return Err(Error::validation(format!(
            "global alignment needs at least two domains, got {k}"
        )));
    }
    for d in domains {
        if d.is_empty() {
            return Err(Error::validation("every domain must be non-empty"));
        }
    }
    let d0 = check_common_dim(&domains[0])?;
    for d in &domains[1..] {
        let di = check_common_dim(d)?;
        if di != d0 {
            return Err(Error::shape("global_alignment_loss domains", d0, di));
        }
    }
    let norm = (k * k) as f64;
    match mode {
        GlobalMode::Quadratic => {
            let selfs: Vec<Vec<f64>> = domains.iter().map(|d| self_inner(cfg, d)).collect();
            let within: Vec<f64> = domains
                .iter()
                .zip(&selfs)
                .map(|(d, s)| level2_block(cfg, d, s, d, s).sum())
                .collect();
            let mut total = 0.0;
            for i in 0..k {
                for j in (i + 1)..k {
                    let cross = level2_block(cfg, &domains[i], &selfs[i], &domains[j], &selfs[j]).sum();
                    let (ni, nj) = (domains[i].len() as f64, domains[j].len() as f64);
                    let v = combine(
                        Estimator::BiasedVStatistic,
                        (within[i], 0.0, ni),
                        (within[j], 0.0, nj),
                        cross,
                    );
                    total += 2.0 * v;
                }
            }
            Ok(total / norm)
        }
        GlobalMode::Linear => {
            let mut total = 0.0;
            for i in 0..k {
                for j in 0..k {
                    if i != j {
                        total += pmmd2_linear(cfg, &domains[i], &domains[j], rng)?;
                    }
                }
            }
            Ok(total / norm)
        }
    }
}

/// Mean-embedding baseline: collapse each embedding to its Monte Carlo mean
/// and take the point-set MMD between the resulting means.
pub fn mean_embedding_mmd2(
    cfg: &KernelConfig,
    dl: &[ProbEmbedding],
    dt: &[ProbEmbedding],
) -> Result<f64> {
    check_domain_pair(dl, dt)?;
    mmd2(cfg, &means_of(dl)?, &means_of(dt)?)
}

fn means_of(xs: &[ProbEmbedding]) -> Result<PointSet> {
    let d = xs[0].dim();
    let mut out = Array2::zeros((xs.len(), d));
    for (mut row, x) in out.rows_mut().into_iter().zip(xs) {
        row.assign(&x.mean());
    }
    PointSet::new(out)
}
