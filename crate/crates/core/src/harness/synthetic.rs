//! Synthetic multi-domain classification data.
//!
//! Every domain shares the same canonical class centres `c_y`; domain `j`
//! draws `x = s_j · R(θ_j) c_y + t_j + σ ε` with `R(θ)` a rotation in the
//! first two coordinates.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::DomainData;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Shift applied to one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainTransform {
    /// Radians, in the plane of the first two coordinates.
    pub rotation: f64,
    /// Empty means zero.
    pub translation: Vec<f64>,
    pub scale: f64,
}

impl Default for DomainTransform {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            translation: Vec::new(),
            scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_domain: usize,
    /// One entry per domain.
    pub domains: Vec<DomainTransform>,
    /// Distance of each class centre from the origin.
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::shift3()
    }
}

impl SyntheticSpec {
    /// Four domains, three classes, eight features, rotated by
    /// 0, 0.35, 0.7 and 1.05 rad.
    pub fn shift3() -> Self {
        Self {
            n_classes: 3,
            dim: 8,
            samples_per_domain: 60,
            domains: [0.0, 0.35, 0.7, 1.05]
                .iter()
                .map(|&rotation| DomainTransform {
                    rotation,
                    ..DomainTransform::default()
                })
                .collect(),
            separation: 2.0,
            noise_sigma: 0.3,
            seed: 0,
        }
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: &str| Err(Error::validation(format!("{field}: {msg}")));
        if self.domains.len() < 2 {
            return err("domains", "need at least two domains");
        }
        if self.n_classes < 2 {
            return err("n_classes", "need at least two classes");
        }
        if self.dim < 2 {
            return err("dim", "need at least two dimensions");
        }
        if self.samples_per_domain < 2 * self.n_classes || !self.samples_per_domain.is_multiple_of(self.n_classes) {
            return err("samples_per_domain", "must be a multiple of n_classes and at least 2 n_classes");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return err("noise_sigma", "must be positive");
        }
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return err("separation", "must be positive");
        }
        for (j, t) in self.domains.iter().enumerate() {
            if !t.rotation.is_finite() || !(t.scale.is_finite() && t.scale > 0.0) {
                return err(&format!("domains[{j}]"), "rotation must be finite and scale positive");
            }
            if !t.translation.is_empty() && t.translation.len() != self.dim {
                return err(&format!("domains[{j}].translation"), "length must equal dim");
            }
            if t.translation.iter().any(|v| !v.is_finite()) {
                return err(&format!("domains[{j}].translation"), "entries must be finite");
            }
        }
        Ok(())
    }

    /// Canonical class centres (`m × d`): scaled unit vectors when `m ≤ d`,
    /// otherwise evenly spaced on a circle in the first two coordinates.
    pub fn class_centres(&self) -> Array2<f64> {
        let (m, d) = (self.n_classes, self.dim);
        let mut c = Array2::zeros((m, d));
        for y in 0..m {
            if m <= d {
                c[[y, y]] = self.separation;
            } else {
                let a = 2.0 * std::f64::consts::PI * y as f64 / m as f64;
                c[[y, 0]] = self.separation * a.cos();
                c[[y, 1]] = self.separation * a.sin();
            }
        }
        c
    }
}

fn transform(t: &DomainTransform, v: &mut [f64]) {
    let (s, c) = t.rotation.sin_cos();
    let (a, b) = (v[0], v[1]);
    v[0] = c * a - s * b;
    v[1] = s * a + c * b;
    for (i, x) in v.iter_mut().enumerate() {
        *x *= t.scale;
        if let Some(shift) = t.translation.get(i) {
            *x += shift;
        }
    }
}

/// Draws every domain of `spec`. Labels cycle `0, 1, …, m−1`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<DomainData>> {
    spec.validate()?;
    let centres = spec.class_centres();
    spec.domains
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let mut rng = stream(spec.seed, Stream::Synthetic, &[j as u64]);
            let n = spec.samples_per_domain;
            let labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
            let mut x = Array2::zeros((n, spec.dim));
            for (i, &y) in labels.iter().enumerate() {
                let mut v = centres.row(y).to_vec();
                transform(t, &mut v);
                for (k, vk) in v.iter().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x[[i, k]] = vk + spec.noise_sigma * e;
                }
            }
            DomainData::new(j, x, labels)
        })
        .collect()
}
