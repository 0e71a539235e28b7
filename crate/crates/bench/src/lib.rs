//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use probalign::{PointSet, ProbEmbedding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn point_set(rng: &mut impl Rng, n: usize, d: usize) -> PointSet {
    PointSet::new(uniform(rng, n, d)).expect("finite points")
}

/// `n` embeddings of `t` samples each in `d` dimensions.
pub fn domain(rng: &mut impl Rng, n: usize, t: usize, d: usize) -> Vec<ProbEmbedding> {
    (0..n)
        .map(|_| ProbEmbedding::new(uniform(rng, t, d)).expect("finite samples"))
        .collect()
}
