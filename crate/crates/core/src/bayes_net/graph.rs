//! Network forward passes recorded on an autodiff [`Graph`].
//!
//! Parameters are registered as leaves in a fixed canonical order; the same
//! order is used by [`NetworkStack::parameters`] so gradients and parameter
//! tensors line up one-to-one.

use ndarray::Array2;

use super::{BayesAffineLayer, LayerNoise, NetworkStack, PassNoise};
use crate::autodiff::{Graph, Var};

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BayesVars {
    pub w_mu: Var,
    pub w_rho: Var,
    pub b_mu: Var,
    pub b_rho: Var,
}

/// Leaf handles for every trainable tensor of a [`NetworkStack`].
#[derive(Debug, Clone)]
pub struct StackVars {
    pub backbone: Vec<DenseVars>,
    pub extractor: BayesVars,
    pub classifier: BayesVars,
    pub metric: Vec<DenseVars>,
}

impl StackVars {
    /// Leaves in canonical parameter order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for d in &self.backbone {
            out.extend([d.weight, d.bias]);
        }
        for b in [&self.extractor, &self.classifier] {
            out.extend([b.w_mu, b.w_rho, b.b_mu, b.b_rho]);
        }
        for d in &self.metric {
            out.extend([d.weight, d.bias]);
        }
        out
    }
}

impl NetworkStack {
    /// Trainable tensors with their names, in canonical order.
    pub fn parameters(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (i, d) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &d.weight));
            out.push((format!("backbone.{i}.bias"), &d.bias));
        }
        for (name, b) in [("extractor", &self.extractor), ("classifier", &self.classifier)] {
            out.push((format!("{name}.weight.mu"), &b.weight.mu));
            out.push((format!("{name}.weight.rho"), &b.weight.rho));
            out.push((format!("{name}.bias.mu"), &b.bias.mu));
            out.push((format!("{name}.bias.rho"), &b.bias.rho));
        }
        for (i, d) in self.metric.layers.iter().enumerate() {
            out.push((format!("metric.{i}.weight"), &d.weight));
            out.push((format!("metric.{i}.bias"), &d.bias));
        }
        out
    }

    /// Mutable trainable tensors in canonical order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for d in &mut self.backbone {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        for b in [&mut self.extractor, &mut self.classifier] {
            out.push(&mut b.weight.mu);
            out.push(&mut b.weight.rho);
            out.push(&mut b.bias.mu);
            out.push(&mut b.bias.rho);
        }
        for d in &mut self.metric.layers {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    /// Total number of trainable scalars.
    pub fn n_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every trainable tensor as a leaf of `g`.
    pub fn register(&self, g: &mut Graph) -> StackVars {
        let dense = |g: &mut Graph, d: &super::DenseLayer| DenseVars {
            weight: g.leaf(d.weight.clone()),
            bias: g.leaf(d.bias.clone()),
        };
        let bayes = |g: &mut Graph, b: &BayesAffineLayer| BayesVars {
            w_mu: g.leaf(b.weight.mu.clone()),
            w_rho: g.leaf(b.weight.rho.clone()),
            b_mu: g.leaf(b.bias.mu.clone()),
            b_rho: g.leaf(b.bias.rho.clone()),
        };
        let backbone = self.backbone.iter().map(|d| dense(g, d)).collect();
        let extractor = bayes(g, &self.extractor);
        let classifier = bayes(g, &self.classifier);
        let metric = self.metric.layers.iter().map(|d| dense(g, d)).collect();
        StackVars {
            backbone,
            extractor,
            classifier,
            metric,
        }
    }
}

fn affine(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

/// Deterministic trunk: `[affine + ReLU]*`.
pub fn backbone(g: &mut Graph, vars: &StackVars, x: Var) -> Var {
    vars.backbone.iter().fold(x, |h, d| {
        let a = affine(g, h, d.weight, d.bias);
        g.relu(a)
    })
}

/// Reparameterized weights `μ + softplus(ρ) ⊙ ε`; posterior means when
/// `noise` is `None`.
pub fn bayes_weights(g: &mut Graph, vars: &BayesVars, noise: Option<&LayerNoise>) -> (Var, Var) {
    match noise {
        None => (vars.w_mu, vars.b_mu),
        Some(n) => {
            let mut draw = |mu: Var, rho: Var, eps: &Array2<f64>| {
                let sigma = g.softplus(rho);
                let e = g.leaf(eps.clone());
                let se = g.mul(sigma, e);
                g.add(mu, se)
            };
            let w = draw(vars.w_mu, vars.w_rho, &n.weight);
            let b = draw(vars.b_mu, vars.b_rho, &n.bias);
            (w, b)
        }
    }
}

/// Bayesian heads on backbone features: `(z, logits)`.
pub fn heads(g: &mut Graph, vars: &StackVars, h: Var, noise: Option<&PassNoise>) -> (Var, Var) {
    let (we, be) = bayes_weights(g, &vars.extractor, noise.map(|n| &n.extractor));
    let pre = affine(g, h, we, be);
    let z = g.relu(pre);
    let (wc, bc) = bayes_weights(g, &vars.classifier, noise.map(|n| &n.classifier));
    let logits = affine(g, z, wc, bc);
    (z, logits)
}

/// Metric network applied row-wise.
pub fn metric(g: &mut Graph, stack: &NetworkStack, vars: &StackVars, e: Var) -> Var {
    let mut h = e;
    for (d, &relu) in vars.metric.iter().zip(&stack.metric.relu) {
        h = affine(g, h, d.weight, d.bias);
        if relu {
            h = g.relu(h);
        }
    }
    h
}

/// `KL(q ‖ p)` of one Bayesian layer as a scalar node.
pub fn layer_kl(g: &mut Graph, vars: &BayesVars, layer: &BayesAffineLayer) -> Var {
    let kw = g.gaussian_kl(
        vars.w_mu,
        vars.w_rho,
        layer.weight.prior_mu.clone(),
        layer.weight.prior_sigma.clone(),
    );
    let kb = g.gaussian_kl(vars.b_mu, vars.b_rho, layer.bias.prior_mu.clone(), layer.bias.prior_sigma.clone());
    g.add(kw, kb)
}
