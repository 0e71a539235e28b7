//! The per-iteration training objective as a differentiable graph.
//!
//! All randomness of one evaluation (weight noise, contrastive pairs and
//! linear-estimator pairings) is drawn up front into [`IterationDraws`], so
//! the same objective can be re-evaluated under perturbed parameters.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array2, Axis};

use super::{Ablation, GlobalVariant, TrainConfig};
use crate::autodiff::{Graph, Var};
use crate::bayes_net::graph::{backbone, heads, layer_kl, metric, StackVars};
use crate::bayes_net::{NetworkStack, PassNoise};
use crate::error::{Error, Result};
use crate::losses::{sample_pairs, total_objective, LocalVariant, LossComponents, PairDraw};
use crate::prob_embedding::{GlobalMode, LinearPairing};
use crate::rng::{stream, Stream};
use crate::train::optim::GradientVector;

/// A labeled minibatch from one source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Random quantities consumed by one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationDraws {
    /// One entry per stochastic pass; empty in deterministic mode.
    pub noise: Vec<PassNoise>,
    pub pairs: PairDraw,
    /// One pairing per ordered domain pair `(a, b)`, `a != b`, row-major.
    pub linear: Vec<LinearPairing>,
}

/// Number of forward passes actually run.
pub(crate) fn passes(cfg: &TrainConfig) -> usize {
    if cfg.ablation.deterministic_mode {
        1
    } else {
        cfg.weights.t_passes
    }
}

fn ordered_domain_pairs(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).flat_map(move |a| (0..k).filter(move |&b| b != a).map(move |b| (a, b)))
}

impl IterationDraws {
    /// Draws from streams keyed by `iteration`, so the result does not depend
    /// on anything drawn earlier.
    pub fn draw(cfg: &TrainConfig, stack: &NetworkStack, batches: &[Batch], iteration: u64) -> Result<Self> {
        let seed = cfg.seed;
        let noise = if cfg.ablation.deterministic_mode {
            Vec::new()
        } else {
            (0..cfg.weights.t_passes as u64)
                .map(|t| {
                    let mut ext = stream(seed, Stream::Noise, &[iteration, t]);
                    if cfg.decouple_noise {
                        let mut cls = stream(seed, Stream::NoiseClassifier, &[iteration, t]);
                        PassNoise::draw_decoupled(stack, &mut ext, &mut cls)
                    } else {
                        PassNoise::draw(stack, &mut ext)
                    }
                })
                .collect()
        };
        let labels: Vec<Vec<usize>> = batches.iter().map(|b| b.labels.clone()).collect();
        let pairs = sample_pairs(&labels, cfg.n_pairs, &mut stream(seed, Stream::Pairs, &[iteration]))?;
        let linear = if cfg.global_mode == GlobalMode::Linear {
            ordered_domain_pairs(batches.len())
                .map(|(a, b)| {
                    let mut rng = stream(seed, Stream::LinearPairing, &[iteration, a as u64, b as u64]);
                    LinearPairing::draw(batches[a].len(), batches[b].len(), &mut rng)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self { noise, pairs, linear })
    }
}

/// Scalar nodes of every objective component.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveParts {
    /// Σ over items of the pass-averaged classification loss.
    pub classification: Var,
    pub kl_extractor: Var,
    pub kl_classifier: Var,
    pub local_positive: Var,
    pub local_negative: Var,
    pub local: Var,
    pub global: Var,
    pub total: Var,
}

/// A recorded objective evaluation.
pub struct Objective {
    pub graph: Graph,
    pub params: StackVars,
    pub parts: ObjectiveParts,
}

/// Per-item-pair level-2 kernel weights of the quadratic global loss, plus
/// the constant contributed by `K(x, x) = 1`.
fn quadratic_global_weights(sizes: &[usize], offsets: &[usize]) -> (BTreeMap<(usize, usize), f64>, f64) {
    let k = sizes.len() as f64;
    let norm = k * k;
    let mut w = BTreeMap::new();
    let mut constant = 0.0;
    for (a, (&na, &oa)) in sizes.iter().zip(offsets).enumerate() {
        let within = 2.0 * (k - 1.0) / (na * na) as f64 / norm;
        constant += within * na as f64;
        for i in 0..na {
            for i2 in (i + 1)..na {
                *w.entry((oa + i, oa + i2)).or_insert(0.0) += 2.0 * within;
            }
        }
        for (&nb, &ob) in sizes.iter().zip(offsets).skip(a + 1) {
            let cross = -4.0 / (na * nb) as f64 / norm;
            for i in 0..na {
                for j in 0..nb {
                    *w.entry((oa + i, ob + j)).or_insert(0.0) += cross;
                }
            }
        }
    }
    (w, constant)
}

fn linear_global_weights(
    sizes: &[usize],
    offsets: &[usize],
    linear: &[LinearPairing],
) -> Result<BTreeMap<(usize, usize), f64>> {
    let k = sizes.len();
    let pairs: Vec<(usize, usize)> = ordered_domain_pairs(k).collect();
    if linear.len() != pairs.len() {
        return Err(Error::shape("linear pairings", pairs.len(), linear.len()));
    }
    let norm = (k * k) as f64;
    let mut w = BTreeMap::new();
    let mut add = |i: usize, j: usize, c: f64| {
        *w.entry((i.min(j), i.max(j))).or_insert(0.0) += c;
    };
    for (&(a, b), p) in pairs.iter().zip(linear) {
        let n = p.left.len();
        if n == 0 || p.right.len() != n {
            return Err(Error::validation("linear pairing must have equal, non-zero lengths"));
        }
        let in_range = |list: &[(usize, usize)], size: usize| list.iter().all(|&(x, y)| x < size && y < size);
        if !in_range(&p.left, sizes[a]) || !in_range(&p.right, sizes[b]) {
            return Err(Error::validation("linear pairing index out of range"));
        }
        let c = 1.0 / (n as f64 * norm);
        for (&(i, i2), &(j, j2)) in p.left.iter().zip(&p.right) {
            let (li, li2, tj, tj2) = (offsets[a] + i, offsets[a] + i2, offsets[b] + j, offsets[b] + j2);
            add(li, li2, c);
            add(tj, tj2, c);
            add(li, tj2, -c);
            add(li2, tj, -c);
        }
    }
    Ok(w)
}

/// `Σ w_ij K(Π_i, Π_j)` over item pairs, with `K` the level-2 kernel on
/// item groups of `e`.
fn level2_weighted(
    g: &mut Graph,
    e: Var,
    groups: &Rc<Vec<Vec<usize>>>,
    weights: BTreeMap<(usize, usize), f64>,
    cfg: &TrainConfig,
) -> Var {
    if weights.is_empty() {
        return g.scalar_leaf(0.0);
    }
    let (pairs, w): (Vec<(usize, usize)>, Vec<f64>) = weights.into_iter().unzip();
    let d = g.group_mmd2(e, Rc::clone(groups), pairs, cfg.kernel.lambda1);
    let scaled = g.scale(d, -0.5 * cfg.kernel.lambda2);
    let k = g.exp(scaled);
    let n = w.len();
    g.weighted_sum(k, Array2::from_shape_vec((n, 1), w).expect("column"))
}

fn branch_mean(g: &mut Graph, d: Var, rows: std::ops::Range<usize>, negative: Option<f64>) -> Var {
    let n = rows.len();
    if n == 0 {
        return g.scalar_leaf(0.0);
    }
    let mut v = g.gather_rows(d, rows.collect());
    if let Some(xi) = negative {
        let neg = g.scale(v, -1.0);
        let shifted = g.add_scalar(neg, xi);
        v = g.relu(shifted);
    }
    g.weighted_sum(v, Array2::from_elem((n, 1), 0.5 / n as f64))
}

impl Objective {
    pub fn build(cfg: &TrainConfig, stack: &NetworkStack, batches: &[Batch], draws: &IterationDraws) -> Result<Self> {
        let ab: &Ablation = &cfg.ablation;
        if batches.len() < 2 {
            return Err(Error::validation("the objective needs at least two domain batches"));
        }
        if batches.iter().any(Batch::is_empty) {
            return Err(Error::validation("empty domain batch"));
        }
        let t_passes = passes(cfg);
        if !ab.deterministic_mode && draws.noise.len() != t_passes {
            return Err(Error::shape("pass noise", t_passes, draws.noise.len()));
        }
        let sizes: Vec<usize> = batches.iter().map(Batch::len).collect();
        let offsets: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            })
            .collect();
        let n_items: usize = sizes.iter().sum();
        let views: Vec<_> = batches.iter().map(|b| b.x.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views)
            .map_err(|_| Error::validation("domain batches disagree on feature dimension"))?;
        let labels: Vec<usize> = batches.iter().flat_map(|b| b.labels.iter().copied()).collect();
        if let Some(&bad) = labels.iter().find(|&&y| y >= stack.n_classes()) {
            return Err(Error::validation(format!("label {bad} out of range for {} classes", stack.n_classes())));
        }

        let mut g = Graph::new();
        let params = stack.register(&mut g);
        let xv = g.leaf(x);
        let h = backbone(&mut g, &params, xv);

        let mut zs = Vec::with_capacity(t_passes);
        let mut class_terms = Vec::with_capacity(t_passes);
        for t in 0..t_passes {
            let noise = (!ab.deterministic_mode).then(|| &draws.noise[t]);
            let (z, logits) = heads(&mut g, &params, h, noise);
            let p = g.softmax_rows(logits);
            let l = g.class_loss(p, labels.clone(), cfg.classification, cfg.focal_gamma);
            zs.push(z);
            class_terms.push((l, 1.0 / t_passes as f64));
        }
        let classification = g.lin_comb(&class_terms);

        let (kl_extractor, kl_classifier) = if ab.deterministic_mode {
            (g.scalar_leaf(0.0), g.scalar_leaf(0.0))
        } else {
            (
                layer_kl(&mut g, &params.extractor, &stack.extractor),
                layer_kl(&mut g, &params.classifier, &stack.classifier),
            )
        };

        // Row i·T + t of `e` is pass t of item i.
        let e = g.interleave(&zs);
        let item_groups: Rc<Vec<Vec<usize>>> =
            Rc::new((0..n_items).map(|i| (i * t_passes..(i + 1) * t_passes).collect()).collect());

        let global = match ab.global_variant {
            GlobalVariant::Pmmd => match cfg.global_mode {
                GlobalMode::Quadratic => {
                    let (w, constant) = quadratic_global_weights(&sizes, &offsets);
                    let s = level2_weighted(&mut g, e, &item_groups, w, cfg);
                    g.add_scalar(s, constant)
                }
                GlobalMode::Linear => {
                    let w = linear_global_weights(&sizes, &offsets, &draws.linear)?;
                    level2_weighted(&mut g, e, &item_groups, w, cfg)
                }
            },
            GlobalVariant::MeanEmbedding => {
                let means = g.group_mean(e, Rc::clone(&item_groups));
                let domain_groups: Rc<Vec<Vec<usize>>> =
                    Rc::new(sizes.iter().zip(&offsets).map(|(&n, &o)| (o..o + n).collect()).collect());
                let k = sizes.len();
                let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| ((a + 1)..k).map(move |b| (a, b))).collect();
                let np = pairs.len();
                let d = g.group_mmd2(means, domain_groups, pairs, cfg.kernel.lambda1);
                g.weighted_sum(d, Array2::from_elem((np, 1), 2.0 / (k * k) as f64))
            }
        };

        let pair_items: Vec<(usize, usize)> = draws
            .pairs
            .all()
            .map(|p| {
                if p.domain_a >= sizes.len() || p.domain_b >= sizes.len() || p.index_a >= sizes[p.domain_a] || p.index_b >= sizes[p.domain_b] {
                    return Err(Error::validation("pair index out of range"));
                }
                Ok((offsets[p.domain_a] + p.index_a, offsets[p.domain_b] + p.index_b))
            })
            .collect::<Result<_>>()?;
        let n_pos = draws.pairs.positives.len();
        let (local_positive, local_negative) = if pair_items.is_empty() {
            (g.scalar_leaf(0.0), g.scalar_leaf(0.0))
        } else {
            let metric_in = if cfg.detach_metric_input {
                let copy = g.value(e).clone();
                g.leaf(copy)
            } else {
                e
            };
            let f = metric(&mut g, stack, &params, metric_in);
            let d = match ab.local_variant {
                LocalVariant::Probabilistic => g.group_mmd2(f, Rc::clone(&item_groups), pair_items.clone(), cfg.kernel.lambda1),
                LocalVariant::MeanEmbedding => {
                    let m = g.group_mean(f, Rc::clone(&item_groups));
                    g.pair_sq_dist(m, pair_items.clone())
                }
            };
            (
                branch_mean(&mut g, d, 0..n_pos, None),
                branch_mean(&mut g, d, n_pos..pair_items.len(), Some(cfg.weights.margin_xi)),
            )
        };
        let local = g.add(local_positive, local_negative);

        let w = cfg.effective_weights();
        let total = g.lin_comb(&[
            (classification, 1.0),
            (kl_extractor, w.kl_scale),
            (kl_classifier, w.kl_scale),
            (local, w.beta1),
            (global, w.beta2),
        ]);
        Ok(Self {
            graph: g,
            params,
            parts: ObjectiveParts {
                classification,
                kl_extractor,
                kl_classifier,
                local_positive,
                local_negative,
                local,
                global,
                total,
            },
        })
    }

    pub fn components(&self) -> LossComponents {
        let s = |v| self.graph.scalar(v);
        LossComponents {
            classification: s(self.parts.classification),
            kl_extractor: s(self.parts.kl_extractor),
            kl_classifier: s(self.parts.kl_classifier),
            local: s(self.parts.local),
            global: s(self.parts.global),
        }
    }

    /// Gradient of any scalar node with respect to all parameters.
    pub fn gradient(&self, stack: &NetworkStack, output: Var) -> Result<GradientVector> {
        let grads = self.graph.backward(output);
        GradientVector::from_graph(stack, &self.params.ordered(), &grads)
    }
}

/// Loss components, total objective and its gradient for one set of draws.
pub fn compute_gradients(
    cfg: &TrainConfig,
    stack: &NetworkStack,
    batches: &[Batch],
    draws: &IterationDraws,
) -> Result<(LossComponents, f64, GradientVector)> {
    let obj = Objective::build(cfg, stack, batches, draws)?;
    let components = obj.components();
    let total = total_objective(&components, &cfg.effective_weights())?;
    let grad = obj.gradient(stack, obj.parts.total)?;
    Ok((components, total, grad))
}
