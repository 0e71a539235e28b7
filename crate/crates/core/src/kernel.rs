//! Level-1 Gaussian RBF kernel, Gram matrices and point-set MMD.
//!
//! The kernel is parameterized by its precision-like bandwidth `λ`:
//!
//! ```text
//! k(x, y) = exp(-(λ/2) · ‖x − y‖²)
//! ```
//!
//! so `λ = 1` corresponds to the unit-variance Gaussian kernel. The same
//! form is used for the level-2 kernel on mean embeddings (see
//! [`crate::prob_embedding`]), which is why both bandwidths live in a single
//! [`KernelConfig`].

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighting of the within-set kernel sums of an MMD estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Plug-in estimate: includes the diagonal `k(x_i, x_i)` terms, always `>= 0`.
    #[default]
    BiasedVStatistic,
    /// Diagonal-excluding estimate: unbiased, may be negative.
    UnbiasedUStatistic,
}

/// Bandwidths of the level-1 and level-2 kernels plus the estimator choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub estimator: Estimator,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            estimator: Estimator::BiasedVStatistic,
        }
    }
}

impl KernelConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let cfg = Self {
            lambda1,
            lambda2,
            estimator: Estimator::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_estimator(mut self, estimator: Estimator) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1.is_finite() && self.lambda1 > 0.0) {
            return Err(Error::validation(format!(
                "lambda1 must be positive and finite, got {}",
                self.lambda1
            )));
        }
        if !(self.lambda2.is_finite() && self.lambda2 > 0.0) {
            return Err(Error::validation(format!(
                "lambda2 must be positive and finite, got {}",
                self.lambda2
            )));
        }
        Ok(())
    }
}

/// A non-empty set of finite points of common dimension, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    points: Array2<f64>,
}

impl PointSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::validation("point set must contain at least one point"));
        }
        if points.ncols() == 0 {
            return Err(Error::validation("points must have dimension >= 1"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("point set contains non-finite entries"));
        }
        Ok(Self { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::shape("PointSet::from_rows", d, bad.len()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let points = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::validation(e.to_string()))?;
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.points
    }
}

#[inline]
pub(crate) fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian RBF from a squared distance.
#[inline]
pub(crate) fn rbf_from_sq(lambda: f64, sq: f64) -> f64 {
    (-(0.5 * lambda) * sq).exp()
}

/// `k(x, y) = exp(-(λ₁/2)‖x − y‖²)`.
pub fn rbf_kernel(cfg: &KernelConfig, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("rbf_kernel", x.len(), y.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::validation("rbf_kernel inputs must be finite"));
    }
    Ok(rbf_from_sq(cfg.lambda1, sq_dist(x, y)))
}

/// Kernel block between the rows of `x` and `y` via the squared-norm expansion
/// `‖x‖² + ‖y‖² − 2⟨x, y⟩`, with tiny negative distances clamped to zero.
pub(crate) fn gram_block(lambda: f64, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
    let xn: Vec<f64> = x.rows().into_iter().map(|r| dot(r, r)).collect();
    let yn: Vec<f64> = y.rows().into_iter().map(|r| dot(r, r)).collect();
    let mut out = Array2::zeros((x.nrows(), y.nrows()));
    for (i, xi) in x.rows().into_iter().enumerate() {
        for (j, yj) in y.rows().into_iter().enumerate() {
            let sq = (xn[i] + yn[j] - 2.0 * dot(xi, yj)).max(0.0);
            out[[i, j]] = rbf_from_sq(lambda, sq);
        }
    }
    out
}

/// Sum of all entries of the kernel block between `x` and `y`, and optionally
/// its trace (for the U-statistic). Same arithmetic as [`gram_block`].
pub(crate) fn block_sum(lambda: f64, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> (f64, f64) {
    let g = gram_block(lambda, x, y);
    let trace = g.diag().sum();
    (g.sum(), trace)
}

/// Gram matrix `G[i, j] = k(x_i, y_j)`.
pub fn gram_matrix(cfg: &KernelConfig, x: &PointSet, y: &PointSet) -> Result<Array2<f64>> {
    if x.dim() != y.dim() {
        return Err(Error::shape("gram_matrix", x.dim(), y.dim()));
    }
    Ok(gram_block(cfg.lambda1, x.view(), y.view()))
}

/// Squared MMD between two point sets under the level-1 kernel.
///
/// With [`Estimator::BiasedVStatistic`] this is the squared RKHS distance
/// between the two empirical mean maps; with
/// [`Estimator::UnbiasedUStatistic`] the within-set diagonals are dropped.
pub fn mmd2(cfg: &KernelConfig, x: &PointSet, y: &PointSet) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::shape("mmd2", x.dim(), y.dim()));
    }
    mmd2_views(cfg.lambda1, cfg.estimator, x.view(), y.view())
}

pub(crate) fn mmd2_views(
    lambda: f64,
    estimator: Estimator,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
) -> Result<f64> {
    let (n, m) = (x.nrows() as f64, y.nrows() as f64);
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(Error::validation("mmd2 requires non-empty point sets"));
    }
    let (sxx, txx) = block_sum(lambda, x, x);
    let (syy, tyy) = block_sum(lambda, y, y);
    let (sxy, _) = block_sum(lambda, x, y);
    match estimator {
        Estimator::BiasedVStatistic => Ok(sxx / (n * n) + syy / (m * m) - 2.0 * sxy / (n * m)),
        Estimator::UnbiasedUStatistic => {
            if x.nrows() < 2 || y.nrows() < 2 {
                return Err(Error::validation(
                    "unbiased mmd2 requires at least two points per set",
                ));
            }
            Ok((sxx - txx) / (n * (n - 1.0)) + (syy - tyy) / (m * (m - 1.0))
                - 2.0 * sxy / (n * m))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut impl Rng, n: usize, d: usize) -> PointSet {
        let flat: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        PointSet::new(Array2::from_shape_vec((n, d), flat).unwrap()).unwrap()
    }

    #[test]
    fn rbf_identity_and_known_value() {
        let cfg = KernelConfig::default();
        assert_eq!(rbf_kernel(&cfg, &[0.3, -1.2], &[0.3, -1.2]).unwrap(), 1.0);
        let k = rbf_kernel(&cfg, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((k - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn rbf_symmetric_on_random_pairs() {
        let cfg = KernelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_eq!(rbf_kernel(&cfg, &x, &y).unwrap(), rbf_kernel(&cfg, &y, &x).unwrap());
        }
    }

    #[test]
    fn rbf_rejects_bad_input() {
        let cfg = KernelConfig::default();
        assert!(matches!(
            rbf_kernel(&cfg, &[0.0], &[0.0, 1.0]),
            Err(Error::InputShape { .. })
        ));
        assert!(matches!(
            rbf_kernel(&cfg, &[f64::NAN], &[0.0]),
            Err(Error::Validation(_))
        ));
        assert!(KernelConfig::new(0.0, 1.0).is_err());
        assert!(KernelConfig::new(1.0, -1.0).is_err());
    }

    #[test]
    fn bandwidth_scaling_matches_coordinate_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(c, root) in &[(4.0, 2.0), (0.25, 0.5)] {
            for _ in 0..20 {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                let scaled = KernelConfig::new(c, 1.0).unwrap();
                let xs: Vec<f64> = x.iter().map(|v| v * root).collect();
                let ys: Vec<f64> = y.iter().map(|v| v * root).collect();
                assert_eq!(
                    rbf_kernel(&scaled, &x, &y).unwrap(),
                    rbf_kernel(&KernelConfig::default(), &xs, &ys).unwrap()
                );
            }
        }
    }

    #[test]
    fn gram_small_cases() {
        let cfg = KernelConfig::default();
        let one = PointSet::new(array![[0.5, 2.0]]).unwrap();
        assert_eq!(gram_matrix(&cfg, &one, &one).unwrap(), array![[1.0]]);

        let two = PointSet::new(array![[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let g = gram_matrix(&cfg, &two, &two).unwrap();
        let e = (-1.0f64).exp();
        assert!((g[[0, 1]] - e).abs() < 1e-15 && (g[[1, 0]] - e).abs() < 1e-15);
        assert_eq!(g[[0, 0]], 1.0);
    }

    #[test]
    fn gram_dimension_mismatch() {
        let cfg = KernelConfig::default();
        let a = PointSet::new(array![[0.0, 0.0]]).unwrap();
        let b = PointSet::new(array![[0.0]]).unwrap();
        assert!(gram_matrix(&cfg, &a, &b).is_err());
        assert!(mmd2(&cfg, &a, &b).is_err());
    }

    #[test]
    fn mmd2_identical_and_singletons() {
        let cfg = KernelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_set(&mut rng, 6, 3);
        assert_eq!(mmd2(&cfg, &x, &x.clone()).unwrap(), 0.0);

        let a = PointSet::new(array![[0.1, 0.4]]).unwrap();
        let b = PointSet::new(array![[-0.7, 1.0]]).unwrap();
        let k = rbf_kernel(&cfg, &[0.1, 0.4], &[-0.7, 1.0]).unwrap();
        assert!((mmd2(&cfg, &a, &b).unwrap() - (2.0 - 2.0 * k)).abs() < 1e-15);
    }

    #[test]
    fn mmd2_matches_naive_four_loop_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = KernelConfig::new(0.7, 1.0).unwrap();
        for _ in 0..20 {
            let x = random_set(&mut rng, 4, 3);
            let y = random_set(&mut rng, 5, 3);
            let k = |a: ArrayView1<f64>, b: ArrayView1<f64>| {
                rbf_kernel(&cfg, a.as_slice().unwrap(), b.as_slice().unwrap()).unwrap()
            };
            let (xv, yv) = (x.view(), y.view());
            let mut naive = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    naive += k(xv.row(i), xv.row(j)) / 16.0;
                }
            }
            for i in 0..5 {
                for j in 0..5 {
                    naive += k(yv.row(i), yv.row(j)) / 25.0;
                }
            }
            for i in 0..4 {
                for j in 0..5 {
                    naive -= 2.0 * k(xv.row(i), yv.row(j)) / 20.0;
                }
            }
            let fast = mmd2(&cfg, &x, &y).unwrap();
            assert!((fast - naive).abs() <= 1e-12 * naive.abs().max(1e-300), "{fast} vs {naive}");
        }
    }

    #[test]
    fn unbiased_requires_two_points() {
        let cfg = KernelConfig::default().with_estimator(Estimator::UnbiasedUStatistic);
        let a = PointSet::new(array![[0.0]]).unwrap();
        let b = PointSet::new(array![[0.0], [1.0]]).unwrap();
        assert!(matches!(mmd2(&cfg, &a, &b), Err(Error::Validation(_))));
        assert!(mmd2(&cfg, &b, &b).is_ok());
    }

    #[test]
    fn empty_point_set_rejected() {
        assert!(PointSet::new(Array2::zeros((0, 2))).is_err());
        assert!(PointSet::new(array![[f64::INFINITY]]).is_err());
    }

    proptest! {
        #[test]
        fn gram_is_symmetric_psd(seed in any::<u64>(), n in 1usize..=16, d in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_set(&mut rng, n, d);
            let g = gram_matrix(&KernelConfig::default(), &x, &x).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(g[[i, j]], g[[j, i]]);
                }
            }
            prop_assert!(crate::linalg::min_eigenvalue_symmetric(&g) >= -1e-8);
        }

        #[test]
        fn biased_mmd2_nonnegative_symmetric_permutation_invariant(
            seed in any::<u64>(), n in 1usize..6, m in 1usize..6
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = KernelConfig::default();
            let x = random_set(&mut rng, n, 2);
            let y = random_set(&mut rng, m, 2);
            let v = mmd2(&cfg, &x, &y).unwrap();
            prop_assert!(v >= -1e-12);
            prop_assert!((v - mmd2(&cfg, &y, &x).unwrap()).abs() < 1e-12);

            let mut rows: Vec<Vec<f64>> = x.view().rows().into_iter().map(|r| r.to_vec()).collect();
            rows.reverse();
            let xp = PointSet::from_rows(&rows).unwrap();
            prop_assert!((v - mmd2(&cfg, &xp, &y).unwrap()).abs() < 1e-12);
        }
    }
}
