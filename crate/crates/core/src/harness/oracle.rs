//! Brute-force reference implementations.
//!
//! Everything here is written as literal nested sums over scalar kernel
//! evaluations, with its own scalar kernel, and none of it calls the fast
//! paths in [`crate::kernel`] or [`crate::prob_embedding`]. The Gaussian KL
//! is integrated numerically. Instances are capped at desk size.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{Estimator, KernelConfig, PointSet};
use crate::prob_embedding::ProbEmbedding;

pub const MAX_POINTS: usize = 8;
pub const MAX_SAMPLES: usize = 6;
pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Mmd2,
    KmeInner,
    Level2,
    Pmmd2,
    KlGaussian,
}

/// Inputs of one oracle evaluation.
#[derive(Debug, Clone, Copy)]
pub enum OracleQuery<'a> {
    Mmd2 {
        cfg: &'a KernelConfig,
        x: &'a PointSet,
        y: &'a PointSet,
    },
    KmeInner {
        cfg: &'a KernelConfig,
        a: &'a ProbEmbedding,
        b: &'a ProbEmbedding,
    },
    Level2 {
        cfg: &'a KernelConfig,
        a: &'a ProbEmbedding,
        b: &'a ProbEmbedding,
    },
    Pmmd2 {
        cfg: &'a KernelConfig,
        dl: &'a [ProbEmbedding],
        dt: &'a [ProbEmbedding],
    },
    /// `KL(N(mu_q, sigma_q²) ‖ N(mu_p, sigma_p²))`.
    KlGaussian {
        mu_q: f64,
        sigma_q: f64,
        mu_p: f64,
        sigma_p: f64,
    },
}

impl OracleQuery<'_> {
    pub fn kind(&self) -> OracleKind {
        match self {
            OracleQuery::Mmd2 { .. } => OracleKind::Mmd2,
            OracleQuery::KmeInner { .. } => OracleKind::KmeInner,
            OracleQuery::Level2 { .. } => OracleKind::Level2,
            OracleQuery::Pmmd2 { .. } => OracleKind::Pmmd2,
            OracleQuery::KlGaussian { .. } => OracleKind::KlGaussian,
        }
    }
}

/// Knobs for mutation testing of the oracle suite.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OracleOptions {
    /// Evaluates `exp(+λ/2 ‖x − y‖²)` instead of `exp(−λ/2 ‖x − y‖²)`.
    pub flip_lambda_sign: bool,
}

struct Oracle {
    opts: OracleOptions,
}

type Rows = Vec<Vec<f64>>;

fn rows_of(view: ndarray::ArrayView2<'_, f64>) -> Rows {
    view.rows().into_iter().map(|r| r.to_vec()).collect()
}

impl Oracle {
    fn k(&self, lambda: f64, x: &[f64], y: &[f64]) -> f64 {
        let mut sq = 0.0;
        for i in 0..x.len() {
            sq += (x[i] - y[i]) * (x[i] - y[i]);
        }
        let sign = if self.opts.flip_lambda_sign { 1.0 } else { -1.0 };
        (sign * lambda / 2.0 * sq).exp()
    }

    /// Literal two-sample estimator over any kernel on items.
    fn two_sample<T>(&self, estimator: Estimator, xs: &[T], ys: &[T], k: impl Fn(&T, &T) -> f64) -> Result<f64> {
        let (n, m) = (xs.len() as f64, ys.len() as f64);
        let mut xx = 0.0;
        for (i, a) in xs.iter().enumerate() {
            for (j, b) in xs.iter().enumerate() {
                if estimator == Estimator::BiasedVStatistic || i != j {
                    xx += k(a, b);
                }
            }
        }
        let mut yy = 0.0;
        for (i, a) in ys.iter().enumerate() {
            for (j, b) in ys.iter().enumerate() {
                if estimator == Estimator::BiasedVStatistic || i != j {
                    yy += k(a, b);
                }
            }
        }
        let mut xy = 0.0;
        for a in xs {
            for b in ys {
                xy += k(a, b);
            }
        }
        match estimator {
            Estimator::BiasedVStatistic => Ok(xx / (n * n) + yy / (m * m) - 2.0 * xy / (n * m)),
            Estimator::UnbiasedUStatistic => {
                if xs.len() < 2 || ys.len() < 2 {
                    return Err(Error::validation("unbiased estimator needs two items per side"));
                }
                Ok(xx / (n * (n - 1.0)) + yy / (m * (m - 1.0)) - 2.0 * xy / (n * m))
            }
        }
    }

    fn kme_inner(&self, lambda1: f64, a: &Rows, b: &Rows) -> f64 {
        let mut s = 0.0;
        for x in a {
            for y in b {
                s += self.k(lambda1, x, y);
            }
        }
        s / (a.len() * b.len()) as f64
    }

    fn level2(&self, cfg: &KernelConfig, a: &Rows, b: &Rows) -> f64 {
        let aa = self.kme_inner(cfg.lambda1, a, a);
        let ab = self.kme_inner(cfg.lambda1, a, b);
        let bb = self.kme_inner(cfg.lambda1, b, b);
        (-cfg.lambda2 / 2.0 * (aa - 2.0 * ab + bb).max(0.0)).exp()
    }
}

fn check_points(n: usize, d: usize) -> Result<()> {
    if n > MAX_POINTS || d > MAX_DIM {
        return Err(Error::validation(format!(
            "oracle instance too large: {n} items of dimension {d} (limits {MAX_POINTS}, {MAX_DIM})"
        )));
    }
    Ok(())
}

fn check_embedding(e: &ProbEmbedding) -> Result<()> {
    if e.n_samples() > MAX_SAMPLES || e.dim() > MAX_DIM {
        return Err(Error::validation(format!(
            "oracle embedding too large: T = {}, d = {} (limits {MAX_SAMPLES}, {MAX_DIM})",
            e.n_samples(),
            e.dim()
        )));
    }
    Ok(())
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape("oracle inputs", a, b));
    }
    Ok(())
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, 48)
}

/// `∫ q(x) [ln q(x) − ln p(x)] dx` by quadrature over `μ_q ± 30 σ_q`, split
/// into panels so the adaptive rule sees the bulk of the mass.
pub fn kl_gaussian_quadrature(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> Result<f64> {
    if ![mu_q, sigma_q, mu_p, sigma_p].iter().all(|v| v.is_finite()) || sigma_q <= 0.0 || sigma_p <= 0.0 {
        return Err(Error::validation("KL oracle needs finite means and positive scales"));
    }
    let log_n = |x: f64, mu: f64, s: f64| {
        let z = (x - mu) / s;
        -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let f = |x: f64| {
        let lq = log_n(x, mu_q, sigma_q);
        lq.exp() * (lq - log_n(x, mu_p, sigma_p))
    };
    let panels = 60;
    let (lo, hi) = (mu_q - 30.0 * sigma_q, mu_q + 30.0 * sigma_q);
    let w = (hi - lo) / panels as f64;
    Ok((0..panels)
        .map(|i| adaptive_simpson(&f, lo + i as f64 * w, lo + (i + 1) as f64 * w, 1e-14))
        .sum())
}

/// Evaluates `query` with the literal reference formulas.
pub fn oracle_reference(query: OracleQuery<'_>) -> Result<f64> {
    oracle_reference_with(query, OracleOptions::default())
}

pub fn oracle_reference_with(query: OracleQuery<'_>, opts: OracleOptions) -> Result<f64> {
    let o = Oracle { opts };
    match query {
        OracleQuery::Mmd2 { cfg, x, y } => {
            check_points(x.len(), x.dim())?;
            check_points(y.len(), y.dim())?;
            check_dims(x.dim(), y.dim())?;
            let (xs, ys) = (rows_of(x.view()), rows_of(y.view()));
            o.two_sample(cfg.estimator, &xs, &ys, |a, b| o.k(cfg.lambda1, a, b))
        }
        OracleQuery::KmeInner { cfg, a, b } => {
            check_embedding(a)?;
            check_embedding(b)?;
            check_dims(a.dim(), b.dim())?;
            Ok(o.kme_inner(cfg.lambda1, &rows_of(a.samples()), &rows_of(b.samples())))
        }
        OracleQuery::Level2 { cfg, a, b } => {
            check_embedding(a)?;
            check_embedding(b)?;
            check_dims(a.dim(), b.dim())?;
            Ok(o.level2(cfg, &rows_of(a.samples()), &rows_of(b.samples())))
        }
        OracleQuery::Pmmd2 { cfg, dl, dt } => {
            if dl.is_empty() || dt.is_empty() {
                return Err(Error::validation("P-MMD oracle needs non-empty domains"));
            }
            check_points(dl.len(), 1)?;
            check_points(dt.len(), 1)?;
            for e in dl.iter().chain(dt) {
                check_embedding(e)?;
                check_dims(dl[0].dim(), e.dim())?;
            }
            let l: Vec<Rows> = dl.iter().map(|e| rows_of(e.samples())).collect();
            let t: Vec<Rows> = dt.iter().map(|e| rows_of(e.samples())).collect();
            o.two_sample(cfg.estimator, &l, &t, |a, b| o.level2(cfg, a, b))
        }
        OracleQuery::KlGaussian {
            mu_q,
            sigma_q,
            mu_p,
            sigma_p,
        } => kl_gaussian_quadrature(mu_q, sigma_q, mu_p, sigma_p),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::mmd2;
    use crate::prob_embedding::{kme_inner, level2_kernel, pmmd2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(rng: &mut impl Rng, n: usize, d: usize) -> PointSet {
        PointSet::from_rows(&(0..n).map(|_| (0..d).map(|_| rng.random_range(-1.5..1.5)).collect()).collect::<Vec<_>>()).unwrap()
    }

    fn cloud(rng: &mut impl Rng, t: usize, d: usize) -> ProbEmbedding {
        ProbEmbedding::new(points(rng, t, d).into_inner()).unwrap()
    }

    #[test]
    fn identical_sets_give_zero() {
        let cfg = KernelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = points(&mut rng, 5, 3);
        let v = oracle_reference(OracleQuery::Mmd2 { cfg: &cfg, x: &x, y: &x }).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn kl_quadrature_known_values() {
        let v = kl_gaussian_quadrature(1.0, 1.0, 0.0, 1.0).unwrap();
        assert!((v - 0.5).abs() < 1e-8, "{v}");
        let v = kl_gaussian_quadrature(0.0, 2.0, 0.0, 1.0).unwrap();
        assert!((v - (0.5f64.ln() + 2.0 - 0.5)).abs() < 1e-8, "{v}");
        assert!(kl_gaussian_quadrature(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn agrees_with_fast_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let cfg = KernelConfig::new(rng.random_range(0.25..4.0), rng.random_range(0.25..4.0))
                .unwrap()
                .with_estimator(if rng.random() { Estimator::BiasedVStatistic } else { Estimator::UnbiasedUStatistic });
            let d = rng.random_range(1..=4);
            let (n, m) = (rng.random_range(2..=8), rng.random_range(2..=8));
            let (x, y) = (points(&mut rng, n, d), points(&mut rng, m, d));
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
            let fast = mmd2(&cfg, &x, &y).unwrap();
            let slow = oracle_reference(OracleQuery::Mmd2 { cfg: &cfg, x: &x, y: &y }).unwrap();
            assert!(rel(fast, slow) < 1e-10 || (fast - slow).abs() < 1e-15);

            let (ta, tb) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let a = cloud(&mut rng, ta, d);
            let b = cloud(&mut rng, tb, d);
            assert!(rel(kme_inner(&cfg, &a, &b).unwrap(), oracle_reference(OracleQuery::KmeInner { cfg: &cfg, a: &a, b: &b }).unwrap()) < 1e-12);
            assert!(rel(level2_kernel(&cfg, &a, &b).unwrap(), oracle_reference(OracleQuery::Level2 { cfg: &cfg, a: &a, b: &b }).unwrap()) < 1e-12);

            let dl: Vec<_> = (0..n).map(|_| cloud(&mut rng, 3, d)).collect();
            let dt: Vec<_> = (0..m).map(|_| cloud(&mut rng, 4, d)).collect();
            let fast = pmmd2(&cfg, &dl, &dt).unwrap();
            let slow = oracle_reference(OracleQuery::Pmmd2 { cfg: &cfg, dl: &dl, dt: &dt }).unwrap();
            assert!(rel(fast, slow) < 1e-10 || (fast - slow).abs() < 1e-15, "{fast} vs {slow}");
        }
    }

    #[test]
    fn oversize_instances_are_rejected() {
        let cfg = KernelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let big = points(&mut rng, 9, 2);
        let ok = points(&mut rng, 3, 2);
        assert!(oracle_reference(OracleQuery::Mmd2 { cfg: &cfg, x: &big, y: &ok }).is_err());
        let wide = cloud(&mut rng, 2, 5);
        assert!(oracle_reference(OracleQuery::KmeInner { cfg: &cfg, a: &wide, b: &wide }).is_err());
        let long = cloud(&mut rng, 7, 2);
        assert!(oracle_reference(OracleQuery::Level2 { cfg: &cfg, a: &long, b: &long }).is_err());
    }

    #[test]
    fn flipped_sign_disagrees() {
        let cfg = KernelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, y) = (points(&mut rng, 4, 2), points(&mut rng, 4, 2));
        let good = oracle_reference(OracleQuery::Mmd2 { cfg: &cfg, x: &x, y: &y }).unwrap();
        let bad = oracle_reference_with(OracleQuery::Mmd2 { cfg: &cfg, x: &x, y: &y }, OracleOptions { flip_lambda_sign: true }).unwrap();
        assert!((good - bad).abs() > 1e-3);
    }
}
