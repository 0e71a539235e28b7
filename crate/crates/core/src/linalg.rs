//! Small dense helpers used by property checks.

use ndarray::Array2;

/// Smallest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
///
/// Intended for the small Gram matrices inspected by the PSD checks
/// (n up to a few dozen); cost is O(n³) per sweep.
pub fn min_eigenvalue_symmetric(g: &Array2<f64>) -> f64 {
    let n = g.nrows();
    assert_eq!(n, g.ncols(), "matrix must be square");
    let mut a = g.clone();
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                off += apq * apq;
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
            }
        }
        if off < 1e-26 {
            break;
        }
    }
    (0..n).map(|i| a[[i, i]]).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn known_spectra() {
        let m = array![[2.0, 1.0], [1.0, 2.0]];
        assert!((min_eigenvalue_symmetric(&m) - 1.0).abs() < 1e-12);
        let m = array![[1.0, 2.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 5.0]];
        assert!((min_eigenvalue_symmetric(&m) + 1.0).abs() < 1e-12);
    }
}
