//! Classification objectives, contrastive alignment of probabilistic
//! embeddings, cross-domain pair sampling and the total training objective.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{mmd2_views, Estimator, KernelConfig};
use crate::prob_embedding::{DomainEmbeddings, ProbEmbedding};

/// Added inside logarithms of classification losses.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationKind {
    #[default]
    CrossEntropy,
    Focal,
}

/// Loss value and its derivative with respect to the true-class probability.
pub(crate) fn classification_loss_and_grad(p: f64, kind: ClassificationKind, gamma: f64) -> (f64, f64) {
    let log_p = (p + LOG_EPS).ln();
    match kind {
        ClassificationKind::CrossEntropy => (-log_p, -1.0 / (p + LOG_EPS)),
        ClassificationKind::Focal => {
            let q = (1.0 - p).max(0.0);
            let w = q.powf(gamma);
            let dw = if gamma == 0.0 {
                0.0
            } else {
                -gamma * q.max(LOG_EPS).powf(gamma - 1.0)
            };
            (-w * log_p, -dw * log_p - w / (p + LOG_EPS))
        }
    }
}

/// Loss of one prediction vector against its label.
///
/// Cross-entropy is `−ln(p_y + ε)`, focal is `−(1 − p_y)^γ ln(p_y + ε)`.
pub fn classification_loss(
    probs: &[f64],
    label: usize,
    kind: ClassificationKind,
    gamma: f64,
) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::validation(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 || probs.iter().any(|p| !(*p >= -1e-6)) {
        return Err(Error::validation("probabilities must lie on the simplex"));
    }
    Ok(classification_loss_and_grad(probs[label].max(0.0), kind, gamma).0)
}

/// Weights of the alignment terms and related knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the local (contrastive) term.
    pub beta1: f64,
    /// Weight of the global (P-MMD) term.
    pub beta2: f64,
    /// Repulsion margin of the negative contrastive branch.
    pub margin_xi: f64,
    /// Stochastic forward passes per input.
    pub t_passes: usize,
    /// Common multiplier of both KL terms.
    pub kl_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 0.1,
            beta2: 0.7,
            margin_xi: 1.0,
            t_passes: 10,
            kl_scale: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("kl_scale", self.kl_scale)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.margin_xi.is_finite() && self.margin_xi > 0.0) {
            return Err(Error::validation("margin_xi must be positive"));
        }
        if self.t_passes == 0 {
            return Err(Error::validation("t_passes must be at least 1"));
        }
        Ok(())
    }
}

/// A cross-domain pair of probabilistic embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub a: ProbEmbedding,
    pub b: ProbEmbedding,
    pub same_label: bool,
    pub domain_a: usize,
    pub domain_b: usize,
}

impl PairSample {
    pub fn new(
        a: ProbEmbedding,
        b: ProbEmbedding,
        same_label: bool,
        domain_a: usize,
        domain_b: usize,
    ) -> Result<Self> {
        if domain_a == domain_b {
            return Err(Error::validation("pairs must span two different domains"));
        }
        if a.dim() != b.dim() {
            return Err(Error::shape("PairSample", a.dim(), b.dim()));
        }
        Ok(Self {
            a,
            b,
            same_label,
            domain_a,
            domain_b,
        })
    }
}

fn contrastive(distance: f64, same_label: bool, margin: f64) -> f64 {
    if same_label {
        0.5 * distance
    } else {
        0.5 * (margin - distance).max(0.0)
    }
}

/// Probabilistic contrastive loss of one (already metric-mapped) pair.
///
/// The distance is the plug-in level-1 MMD² between the two sample clouds;
/// same-label pairs are pulled together, others pushed beyond `ξ`.
pub fn pcsa_loss(cfg: &KernelConfig, pair: &PairSample, weights: &LossWeights) -> Result<f64> {
    let d = mmd2_views(
        cfg.lambda1,
        Estimator::BiasedVStatistic,
        pair.a.samples(),
        pair.b.samples(),
    )?;
    Ok(contrastive(d, pair.same_label, weights.margin_xi))
}

/// Mean-embedding contrastive baseline: squared Euclidean distance between
/// the Monte Carlo means.
pub fn mean_csa_loss(pair: &PairSample, weights: &LossWeights) -> Result<f64> {
    let diff = pair.a.mean() - pair.b.mean();
    Ok(contrastive(diff.dot(&diff), pair.same_label, weights.margin_xi))
}

/// Which contrastive distance the local term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalVariant {
    #[default]
    Probabilistic,
    MeanEmbedding,
}

/// Local alignment loss over a set of pairs: mean of the positive-branch
/// values plus mean of the negative-branch values. An empty branch
/// contributes zero.
pub fn local_alignment_loss(
    cfg: &KernelConfig,
    pairs: &[PairSample],
    weights: &LossWeights,
    variant: LocalVariant,
) -> Result<f64> {
    let (mut pos, mut n_pos, mut neg, mut n_neg) = (0.0, 0usize, 0.0, 0usize);
    for pair in pairs {
        let v = match variant {
            LocalVariant::Probabilistic => pcsa_loss(cfg, pair, weights)?,
            LocalVariant::MeanEmbedding => mean_csa_loss(pair, weights)?,
        };
        if pair.same_label {
            pos += v;
            n_pos += 1;
        } else {
            neg += v;
            n_neg += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(mean(pos, n_pos) + mean(neg, n_neg))
}

/// Index form of a cross-domain pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIndex {
    pub domain_a: usize,
    pub index_a: usize,
    pub domain_b: usize,
    pub index_b: usize,
    pub same_label: bool,
}

/// Result of [`sample_pairs`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairDraw {
    pub positives: Vec<PairIndex>,
    pub negatives: Vec<PairIndex>,
    /// Candidate pairs drawn in total.
    pub candidates: usize,
    /// Candidates that had equal labels.
    pub candidate_positives: usize,
    /// No cross-domain pair with equal labels exists.
    pub positives_unrealizable: bool,
    /// No cross-domain pair with different labels exists.
    pub negatives_unrealizable: bool,
}

impl PairDraw {
    pub fn all(&self) -> impl Iterator<Item = &PairIndex> {
        self.positives.iter().chain(&self.negatives)
    }
}

/// Uniform sampler of cross-domain candidate pairs: an unordered pair of
/// distinct domains first, then one item from each.
pub struct PairSampler<'a> {
    labels: &'a [Vec<usize>],
    domain_pairs: Vec<(usize, usize)>,
}

impl<'a> PairSampler<'a> {
    pub fn new(labels: &'a [Vec<usize>]) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::validation(format!(
                "pair sampling needs at least two domains, got {}",
                labels.len()
            )));
        }
        if labels.iter().any(Vec::is_empty) {
            return Err(Error::validation("pair sampling needs non-empty domains"));
        }
        let k = labels.len();
        let domain_pairs = (0..k)
            .flat_map(|a| ((a + 1)..k).map(move |b| (a, b)))
            .collect();
        Ok(Self {
            labels,
            domain_pairs,
        })
    }

    pub fn draw_candidate(&self, rng: &mut impl Rng) -> PairIndex {
        let (a, b) = self.domain_pairs[rng.random_range(0..self.domain_pairs.len())];
        let i = rng.random_range(0..self.labels[a].len());
        let j = rng.random_range(0..self.labels[b].len());
        PairIndex {
            domain_a: a,
            index_a: i,
            domain_b: b,
            index_b: j,
            same_label: self.labels[a][i] == self.labels[b][j],
        }
    }

    fn realizable(&self) -> (bool, bool) {
        let (mut pos, mut neg) = (false, false);
        for &(a, b) in &self.domain_pairs {
            for la in &self.labels[a] {
                for lb in &self.labels[b] {
                    if la == lb {
                        pos = true;
                    } else {
                        neg = true;
                    }
                    if pos && neg {
                        return (true, true);
                    }
                }
            }
        }
        (pos, neg)
    }
}

/// Draws up to `n_pairs` positive and `n_pairs` negative cross-domain pairs
/// from per-domain label lists.
///
/// A category with no admissible pair is returned empty and flagged.
pub fn sample_pairs(labels: &[Vec<usize>], n_pairs: usize, rng: &mut impl Rng) -> Result<PairDraw> {
    if n_pairs == 0 {
        return Err(Error::validation("n_pairs must be positive"));
    }
    let sampler = PairSampler::new(labels)?;
    let (can_pos, can_neg) = sampler.realizable();
    let mut out = PairDraw {
        positives_unrealizable: !can_pos,
        negatives_unrealizable: !can_neg,
        ..PairDraw::default()
    };
    if !can_pos {
        warn!("no cross-domain pair shares a label; positive pairs unavailable");
    }
    if !can_neg {
        warn!("all cross-domain pairs share a label; negative pairs unavailable");
    }
    let want_pos = if can_pos { n_pairs } else { 0 };
    let want_neg = if can_neg { n_pairs } else { 0 };
    let max_candidates = 200 * n_pairs.max(8);
    while (out.positives.len() < want_pos || out.negatives.len() < want_neg)
        && out.candidates < max_candidates
    {
        let c = sampler.draw_candidate(rng);
        out.candidates += 1;
        if c.same_label {
            out.candidate_positives += 1;
            if out.positives.len() < want_pos {
                out.positives.push(c);
            }
        } else if out.negatives.len() < want_neg {
            out.negatives.push(c);
        }
    }
    if out.positives.len() < want_pos || out.negatives.len() < want_neg {
        warn!(
            "pair sampling stopped after {} candidates with {} positives and {} negatives",
            out.candidates,
            out.positives.len(),
            out.negatives.len()
        );
    }
    Ok(out)
}

/// Builds [`PairSample`]s from a draw over the given domains.
pub fn materialize_pairs(draw: &PairDraw, domains: &[DomainEmbeddings]) -> Result<Vec<PairSample>> {
    draw.all()
        .map(|p| {
            let a = domains
                .get(p.domain_a)
                .and_then(|d| d.members().get(p.index_a))
                .ok_or_else(|| Error::validation("pair index out of range"))?;
            let b = domains
                .get(p.domain_b)
                .and_then(|d| d.members().get(p.index_b))
                .ok_or_else(|| Error::validation("pair index out of range"))?;
            PairSample::new(a.clone(), b.clone(), p.same_label, p.domain_a, p.domain_b)
        })
        .collect()
}

/// The five components of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub classification: f64,
    pub kl_extractor: f64,
    pub kl_classifier: f64,
    pub local: f64,
    pub global: f64,
}

/// `L_c + s·KL_Q + s·KL_C + β₁ L_local + β₂ L_global` with `s = kl_scale`.
pub fn total_objective(c: &LossComponents, weights: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("classification", c.classification),
        ("kl_extractor", c.kl_extractor),
        ("kl_classifier", c.kl_classifier),
        ("local", c.local),
        ("global", c.global),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name}")));
        }
    }
    Ok(c.classification
        + weights.kl_scale * c.kl_extractor
        + weights.kl_scale * c.kl_classifier
        + weights.beta1 * c.local
        + weights.beta2 * c.global)
}
