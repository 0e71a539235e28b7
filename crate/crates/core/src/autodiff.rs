//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Nodes hold dense `f64` matrices. Every operation appends a node to the
//! [`Graph`] and returns a [`Var`] handle; [`Graph::backward`] walks the
//! nodes in reverse insertion order (a valid topological order) and
//! accumulates adjoints.
//!
//! Besides the usual elementwise and matrix operations the graph carries a
//! few fused nodes with hand-written adjoints: the level-1 MMD between
//! groups of rows (the workhorse of both alignment losses), the closed-form
//! Gaussian KL, and the summed classification loss.
//!
//! Shape mismatches while building a graph are programming errors and panic.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::kernel::{block_sum, rbf_from_sq};
use crate::losses::{classification_loss_and_grad, ClassificationKind};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBroadcast(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    SoftmaxRows(Var),
    Sum(Var),
    LinComb(Vec<(Var, f64)>),
    WeightedSum(Var, Array2<f64>),
    Interleave(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GroupMean(Var, Rc<Vec<Vec<usize>>>),
    PairSqDist(Var, Vec<(usize, usize)>),
    GroupMmd2 {
        input: Var,
        groups: Rc<Vec<Vec<usize>>>,
        pairs: Vec<(usize, usize)>,
        lambda: f64,
    },
    GaussianKl {
        mu: Var,
        rho: Var,
        prior_mu: Array2<f64>,
        prior_sigma: Array2<f64>,
    },
    ClassLoss {
        probs: Var,
        labels: Vec<usize>,
        kind: ClassificationKind,
        gamma: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Closed-form `KL(N(μ, softplus(ρ)²) ‖ N(μ_p, σ_p²))` summed over entries.
pub fn gaussian_kl_sum(
    mu: &Array2<f64>,
    rho: &Array2<f64>,
    prior_mu: &Array2<f64>,
    prior_sigma: &Array2<f64>,
) -> f64 {
    let mut total = 0.0;
    Zip::from(mu)
        .and(rho)
        .and(prior_mu)
        .and(prior_sigma)
        .for_each(|&m, &r, &pm, &ps| {
            let sq = softplus(r);
            let diff = m - pm;
            total += (ps / sq).ln() + (sq * sq + diff * diff) / (2.0 * ps * ps) - 0.5;
        });
    total
}

fn rows_of(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), x.ncols()));
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(k).assign(&x.row(r));
    }
    out
}

/// Gradients of one scalar output with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` if `v` is not on the path.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

/// A recorded computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input node: a trainable parameter or a constant.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "node is not a scalar");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a + b` where `b` is a `1 × c` row added to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.nrows(), 1, "broadcast operand must be a single row");
        assert_eq!(av.ncols(), bv.ncols(), "broadcast width mismatch");
        let value = av + &bv.row(0);
        self.push(value, Op::AddRowBroadcast(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// `Σ c_i · v_i` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "empty linear combination");
        let shape = self.shape(terms[0].0);
        let mut value = Array2::zeros(shape);
        for &(v, c) in terms {
            assert_eq!(self.shape(v), shape, "linear combination shape mismatch");
            value.scaled_add(c, self.value(v));
        }
        self.push(value, Op::LinComb(terms.to_vec()))
    }

    /// `Σ w ⊙ a` with constant weights, as a `1 × 1` node.
    pub fn weighted_sum(&mut self, a: Var, weights: Array2<f64>) -> Var {
        assert_eq!(self.shape(a), weights.dim(), "weight shape mismatch");
        let value = Array2::from_elem((1, 1), (self.value(a) * &weights).sum());
        self.push(value, Op::WeightedSum(a, weights))
    }

    /// Interleaves `T` equally shaped `N × d` nodes into an `(N·T) × d` node
    /// whose row `i·T + t` is row `i` of input `t`.
    pub fn interleave(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "nothing to interleave");
        let (n, d) = self.shape(parts[0]);
        let t = parts.len();
        let mut value = Array2::zeros((n * t, d));
        for (k, &p) in parts.iter().enumerate() {
            assert_eq!(self.shape(p), (n, d), "interleave shape mismatch");
            let src = self.value(p);
            for i in 0..n {
                value.row_mut(i * t + k).assign(&src.row(i));
            }
        }
        self.push(value, Op::Interleave(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "nothing to concatenate");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let value = rows_of(self.value(a), &rows);
        self.push(value, Op::GatherRows(a, rows))
    }

    /// Row `g` of the output is the mean of the input rows listed in group `g`.
    pub fn group_mean(&mut self, a: Var, groups: Rc<Vec<Vec<usize>>>) -> Var {
        let x = self.value(a);
        let mut value = Array2::zeros((groups.len(), x.ncols()));
        for (g, rows) in groups.iter().enumerate() {
            assert!(!rows.is_empty(), "empty group");
            let mut acc = value.row_mut(g);
            for &r in rows {
                acc += &x.row(r);
            }
            acc /= rows.len() as f64;
        }
        self.push(value, Op::GroupMean(a, groups))
    }

    /// Squared Euclidean distance between row pairs, as a `P × 1` node.
    pub fn pair_sq_dist(&mut self, a: Var, pairs: Vec<(usize, usize)>) -> Var {
        let x = self.value(a);
        let mut value = Array2::zeros((pairs.len(), 1));
        for (k, &(i, j)) in pairs.iter().enumerate() {
            let diff = &x.row(i) - &x.row(j);
            value[[k, 0]] = diff.dot(&diff);
        }
        self.push(value, Op::PairSqDist(a, pairs))
    }

    /// Plug-in level-1 MMD² between groups of rows of `a`, one entry per
    /// requested pair of groups, as a `P × 1` node.
    ///
    /// Entry `p = (g, h)` equals `s_gg + s_hh − 2 s_gh` with
    /// `s_gh = (1/|g||h|) Σ_{i∈g, j∈h} k(a_i, a_j)`.
    pub fn group_mmd2(
        &mut self,
        a: Var,
        groups: Rc<Vec<Vec<usize>>>,
        pairs: Vec<(usize, usize)>,
        lambda: f64,
    ) -> Var {
        let x = self.value(a);
        let members: Vec<Array2<f64>> = groups.iter().map(|g| rows_of(x, g)).collect();
        let mut inner: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut s = |g: usize, h: usize| -> f64 {
            *inner.entry((g, h)).or_insert_with(|| {
                let (sum, _) = block_sum(lambda, members[g].view(), members[h].view());
                sum / (members[g].nrows() * members[h].nrows()) as f64
            })
        };
        let mut value = Array2::zeros((pairs.len(), 1));
        for (k, &(g, h)) in pairs.iter().enumerate() {
            value[[k, 0]] = if g == h {
                0.0
            } else {
                s(g, g) + s(h, h) - 2.0 * s(g, h)
            };
        }
        self.push(
            value,
            Op::GroupMmd2 {
                input: a,
                groups,
                pairs,
                lambda,
            },
        )
    }

    /// Summed closed-form KL of a factorized Gaussian to a fixed prior.
    pub fn gaussian_kl(
        &mut self,
        mu: Var,
        rho: Var,
        prior_mu: Array2<f64>,
        prior_sigma: Array2<f64>,
    ) -> Var {
        assert_eq!(self.shape(mu), self.shape(rho));
        assert_eq!(self.shape(mu), prior_mu.dim());
        assert_eq!(self.shape(mu), prior_sigma.dim());
        let kl = gaussian_kl_sum(self.value(mu), self.value(rho), &prior_mu, &prior_sigma);
        self.push(
            Array2::from_elem((1, 1), kl),
            Op::GaussianKl {
                mu,
                rho,
                prior_mu,
                prior_sigma,
            },
        )
    }

    /// Classification loss summed over the rows of a probability matrix.
    pub fn class_loss(
        &mut self,
        probs: Var,
        labels: Vec<usize>,
        kind: ClassificationKind,
        gamma: f64,
    ) -> Var {
        let p = self.value(probs);
        assert_eq!(p.nrows(), labels.len(), "one label per row");
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| classification_loss_and_grad(p[[i, y]], kind, gamma).0)
            .sum();
        self.push(
            Array2::from_elem((1, 1), total),
            Op::ClassLoss {
                probs,
                labels,
                kind,
                gamma,
            },
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=output.0).map(|_| None).collect();
        grads.extend((output.0 + 1..self.nodes.len()).map(|_| None));
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, delta: Array2<f64>| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.dot(&self.value(*b).t()));
                acc(*b, self.value(*a).t().dot(g));
            }
            Op::AddRowBroadcast(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*a, d);
            }
            Op::Softplus(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= sigmoid(x));
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                let dots = d.sum_axis(Axis(1));
                for (mut row, (yr, dot)) in d.rows_mut().into_iter().zip(y.rows().into_iter().zip(dots.iter())) {
                    row.scaled_add(-dot, &yr);
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                acc(*a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    acc(v, g * c);
                }
            }
            Op::WeightedSum(a, w) => acc(*a, w * g[[0, 0]]),
            Op::Interleave(parts) => {
                let t = parts.len();
                let (n, d) = self.shape(parts[0]);
                for (k, &p) in parts.iter().enumerate() {
                    let mut part = Array2::zeros((n, d));
                    for i in 0..n {
                        part.row_mut(i).assign(&g.row(i * t + k));
                    }
                    acc(p, part);
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    acc(p, g.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::GatherRows(a, rows) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (k, &r) in rows.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    row += &g.row(k);
                }
                acc(*a, d);
            }
            Op::GroupMean(a, groups) => {
                let mut d = Array2::zeros(self.shape(*a));
                for (k, rows) in groups.iter().enumerate() {
                    let w = 1.0 / rows.len() as f64;
                    for &r in rows {
                        d.row_mut(r).scaled_add(w, &g.row(k));
                    }
                }
                acc(*a, d);
            }
            Op::PairSqDist(a, pairs) => {
                let x = self.value(*a);
                let mut d = Array2::zeros(x.dim());
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    let diff = &x.row(i) - &x.row(j);
                    let c = 2.0 * g[[k, 0]];
                    d.row_mut(i).scaled_add(c, &diff);
                    d.row_mut(j).scaled_add(-c, &diff);
                }
                acc(*a, d);
            }
            Op::GroupMmd2 {
                input,
                groups,
                pairs,
                lambda,
            } => acc(*input, self.group_mmd2_adjoint(*input, groups, pairs, *lambda, g)),
            Op::GaussianKl {
                mu,
                rho,
                prior_mu,
                prior_sigma,
            } => {
                let scale = g[[0, 0]];
                let (mv, rv) = (self.value(*mu), self.value(*rho));
                let mut dmu = Array2::zeros(mv.dim());
                let mut drho = Array2::zeros(rv.dim());
                Zip::from(&mut dmu)
                    .and(&mut drho)
                    .and(mv)
                    .and(rv)
                    .and(prior_mu)
                    .and(prior_sigma)
                    .for_each(|dm, dr, &m, &r, &pm, &ps| {
                        let sq = softplus(r);
                        let var_p = ps * ps;
                        *dm = scale * (m - pm) / var_p;
                        *dr = scale * (-1.0 / sq + sq / var_p) * sigmoid(r);
                    });
                acc(*mu, dmu);
                acc(*rho, drho);
            }
            Op::ClassLoss {
                probs,
                labels,
                kind,
                gamma,
            } => {
                let p = self.value(*probs);
                let mut d = Array2::zeros(p.dim());
                for (i, &y) in labels.iter().enumerate() {
                    d[[i, y]] = g[[0, 0]] * classification_loss_and_grad(p[[i, y]], *kind, *gamma).1;
                }
                acc(*probs, d);
            }
        }
    }

    fn group_mmd2_adjoint(
        &self,
        input: Var,
        groups: &[Vec<usize>],
        pairs: &[(usize, usize)],
        lambda: f64,
        g: &Array2<f64>,
    ) -> Array2<f64> {
        // Coefficients on the symmetric inner products s_{gh}, keyed with g <= h.
        let mut coef: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (k, &(a, b)) in pairs.iter().enumerate() {
            if a == b {
                continue;
            }
            let gk = g[[k, 0]];
            *coef.entry((a, a)).or_default() += gk;
            *coef.entry((b, b)).or_default() += gk;
            *coef.entry((a.min(b), a.max(b))).or_default() -= 2.0 * gk;
        }
        let x = self.value(input);
        let mut d = Array2::zeros(x.dim());
        // ∂k(x, y)/∂x = −λ k(x, y) (x − y)
        let pull = |rows: &[usize], others: &[usize], w: f64, d: &mut Array2<f64>| {
            for &p in rows {
                let xp = x.row(p);
                let mut total = ndarray::Array1::<f64>::zeros(x.ncols());
                for &q in others {
                    let diff = &xp - &x.row(q);
                    let k = rbf_from_sq(lambda, diff.dot(&diff));
                    total.scaled_add(-lambda * k, &diff);
                }
                d.row_mut(p).scaled_add(w, &total);
            }
        };
        for (&(a, b), &c) in &coef {
            if c == 0.0 {
                continue;
            }
            let (ga, gb) = (&groups[a], &groups[b]);
            let norm = (ga.len() * gb.len()) as f64;
            if a == b {
                pull(ga, ga, 2.0 * c / norm, &mut d);
            } else {
                pull(ga, gb, c / norm, &mut d);
                pull(gb, ga, c / norm, &mut d);
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` at every entry of every input.
    fn check<F>(inputs: Vec<Array2<f64>>, f: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |vals: &[Array2<f64>]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = vals.iter().map(|x| g.leaf(x.clone())).collect();
            let o = f(&mut g, &vs);
            g.scalar(o)
        };
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[k], x.dim());
            for idx in 0..x.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[idx];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < tol, "input {k} entry {idx}: analytic {an} vs fd {fd}");
            }
        }
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_and_matrix_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 1, 2)];
        check(
            inputs,
            |g, v| {
                let h = g.matmul(v[0], v[1]);
                let h = g.add_row(h, v[2]);
                let a = g.softplus(h);
                let b = g.exp(h);
                let c = g.mul(a, b);
                let d = g.sub(c, h);
                let e = g.scale(d, 0.3);
                let f = g.add_scalar(e, 2.0);
                let sm = g.softmax_rows(f);
                let w = Array2::from_shape_fn((3, 2), |(i, j)| (i + 2 * j) as f64 - 1.5);
                let s1 = g.weighted_sum(sm, w);
                let s2 = g.sum(d);
                g.lin_comb(&[(s1, 1.5), (s2, -0.25)])
            },
            1e-6,
        );
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        check(
            vec![array![[0.5, -0.7], [1.2, -0.1]]],
            |g, v| {
                let r = g.relu(v[0]);
                let r2 = g.mul(r, r);
                g.sum(r2)
            },
            1e-6,
        );
    }

    #[test]
    fn row_plumbing_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(&mut rng, 2, 3), random(&mut rng, 2, 3)];
        check(
            inputs,
            |g, v| {
                let il = g.interleave(&[v[0], v[1]]);
                let cat = g.concat_rows(&[il, v[0]]);
                let ga = g.gather_rows(cat, vec![0, 3, 5, 5]);
                let gm = g.group_mean(ga, Rc::new(vec![vec![0, 1], vec![2, 3], vec![1]]));
                let pd = g.pair_sq_dist(gm, vec![(0, 1), (1, 2), (2, 0)]);
                let sq = g.mul(pd, pd);
                g.sum(sq)
            },
            1e-6,
        );
    }

    #[test]
    fn interleave_layout() {
        let mut g = Graph::new();
        let a = g.leaf(array![[1.0], [2.0]]);
        let b = g.leaf(array![[10.0], [20.0]]);
        let il = g.interleave(&[a, b]);
        assert_eq!(g.value(il), &array![[1.0], [10.0], [2.0], [20.0]]);
    }

    #[test]
    fn group_mmd2_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![random(&mut rng, 7, 2)];
        let groups = Rc::new(vec![vec![0, 1, 2], vec![3, 4], vec![5, 6], vec![2, 5]]);
        check(
            inputs,
            move |g, v| {
                let d = g.group_mmd2(v[0], groups.clone(), vec![(0, 1), (1, 2), (2, 0), (3, 0), (1, 1)], 0.8);
                let w = array![[1.0], [-0.5], [2.0], [0.7], [3.0]];
                g.weighted_sum(d, w)
            },
            1e-6,
        );
    }

    #[test]
    fn group_mmd2_matches_point_set_mmd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 5, 3);
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let d = g.group_mmd2(v, Rc::new(vec![vec![0, 1], vec![2, 3, 4]]), vec![(0, 1)], 1.0);
        let cfg = crate::kernel::KernelConfig::default();
        let a = crate::kernel::PointSet::new(x.slice(s![0..2, ..]).to_owned()).unwrap();
        let b = crate::kernel::PointSet::new(x.slice(s![2..5, ..]).to_owned()).unwrap();
        let expected = crate::kernel::mmd2(&cfg, &a, &b).unwrap();
        assert!((g.value(d)[[0, 0]] - expected).abs() < 1e-15);
    }

    #[test]
    fn gaussian_kl_gradient_and_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior_mu = random(&mut rng, 2, 3);
        let prior_sigma = random(&mut rng, 2, 3).mapv(|v| 0.3 + v.abs());
        let (pm, ps) = (prior_mu.clone(), prior_sigma.clone());
        check(
            vec![random(&mut rng, 2, 3), random(&mut rng, 2, 3)],
            move |g, v| g.gaussian_kl(v[0], v[1], pm.clone(), ps.clone()),
            1e-6,
        );
        let rho = prior_sigma.mapv(softplus_inv);
        assert!(gaussian_kl_sum(&prior_mu, &rho, &prior_mu, &prior_sigma).abs() < 1e-14);
    }

    #[test]
    fn class_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in [ClassificationKind::CrossEntropy, ClassificationKind::Focal] {
            check(
                vec![random(&mut rng, 3, 4)],
                move |g, v| {
                    let p = g.softmax_rows(v[0]);
                    g.class_loss(p, vec![0, 3, 1], kind, 2.0)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-6, 0.01, 0.5, 3.0, 45.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() <= 1e-12 * y.max(1.0));
        }
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn unused_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(array![[1.0, 2.0]]);
        let b = g.leaf(array![[3.0, 4.0]]);
        let s = g.sum(a);
        let grads = g.backward(s);
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(a).unwrap(), &array![[1.0, 1.0]]);
    }
}
