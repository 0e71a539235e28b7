//! Flat gradient vectors and the Adam optimizer.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Var};
use crate::bayes_net::NetworkStack;
use crate::error::{Error, Result};

/// Location of one named tensor inside a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: (usize, usize),
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Block layout of the trainable parameters of a stack, in canonical order.
pub fn parameter_layout(stack: &NetworkStack) -> Vec<ParamBlock> {
    let mut offset = 0;
    stack
        .parameters()
        .into_iter()
        .map(|(name, t)| {
            let b = ParamBlock {
                name,
                shape: t.dim(),
                offset,
            };
            offset += b.len();
            b
        })
        .collect()
}

/// All trainable parameters as one flat vector, in canonical order.
pub fn flatten_parameters(stack: &NetworkStack) -> Vec<f64> {
    stack
        .parameters()
        .into_iter()
        .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
        .collect()
}

/// Writes a flat vector back into the stack.
pub fn assign_parameters(stack: &mut NetworkStack, flat: &[f64]) -> Result<()> {
    let total = stack.n_parameters();
    if flat.len() != total {
        return Err(Error::shape("parameter vector", total, flat.len()));
    }
    let mut offset = 0;
    for t in stack.parameters_mut() {
        let n = t.len();
        for (dst, &src) in t.iter_mut().zip(&flat[offset..offset + n]) {
            *dst = src;
        }
        offset += n;
    }
    Ok(())
}

/// Gradient of a scalar with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub blocks: Vec<ParamBlock>,
    pub values: Vec<f64>,
}

impl GradientVector {
    /// Collects gradients for `vars` (canonical order). Leaves that the
    /// output does not depend on get exact zeros.
    pub fn from_graph(stack: &NetworkStack, vars: &[Var], grads: &Gradients) -> Result<Self> {
        let blocks = parameter_layout(stack);
        if blocks.len() != vars.len() {
            return Err(Error::shape("gradient blocks", blocks.len(), vars.len()));
        }
        let mut values = Vec::with_capacity(blocks.last().map_or(0, |b| b.offset + b.len()));
        for (block, &v) in blocks.iter().zip(vars) {
            let g = grads.get_or_zeros(v, block.shape);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter block {}", block.name)));
            }
            values.extend(g.iter().copied());
        }
        Ok(Self { blocks, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        let b = self.blocks.iter().find(|b| b.name == name)?;
        ArrayView2::from_shape(b.shape, &self.values[b.offset..b.offset + b.len()]).ok()
    }

    pub fn block_owned(&self, name: &str) -> Option<Array2<f64>> {
        self.block(name).map(|v| v.to_owned())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPSILON: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::shape("adam gradient", params.len(), grads.len()));
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape("adam state", params.len(), state.m.len()));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::validation("learning rate must be finite and >= 0"));
    }
    state.step += 1;
    let (b1, b2) = (AdamState::BETA1, AdamState::BETA2);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + AdamState::EPSILON);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 1e-3).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut w = vec![1.0];
        let mut s = AdamState::new(1);
        let mut prev = w[0] * w[0];
        for _ in 0..10 {
            let g = 2.0 * w[0];
            adam_step(&mut w, &[g], &mut s, 0.05).unwrap();
            let f = w[0] * w[0];
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn zero_lr_is_identity_and_shapes_are_checked() {
        let mut p = vec![0.3, 0.7];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[5.0, -1.0], &mut s, 0.0).unwrap();
        assert_eq!(p, vec![0.3, 0.7]);
        assert!(adam_step(&mut p, &[1.0], &mut s, 0.1).is_err());
        assert!(adam_step(&mut p, &[1.0, 1.0], &mut AdamState::new(3), 0.1).is_err());
    }
}
