//! Mean-field variational Bayesian layers and the network stack.
//!
//! Each Bayesian parameter carries a factorized Gaussian posterior
//! `q(w) = N(μ, σ²)` with `σ = softplus(ρ)`, and a fixed Gaussian prior.
//! A stochastic forward pass draws every Bayesian weight once through the
//! reparameterization `w = μ + σ ⊙ ε`, `ε ~ N(0, I)`, and shares that draw
//! across all rows of the batch (unless per-item draws are requested).
//!
//! The stack is:
//!
//! ```text
//! x ─► [dense + ReLU]* ─► Bayes affine + ReLU ─► z ─► Bayes affine ─► logits
//!                                                 └─► metric MLP (alignment only)
//! ```

mod checkpoint;
pub mod graph;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use ndarray::{Array1, Array2, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_kl_sum, softmax_rows, softplus, softplus_inv};
use crate::error::{Error, Result};
use crate::prob_embedding::ProbEmbedding;

/// Default lower bound on prior scales.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-3;

/// Factorized Gaussian posterior over one parameter tensor plus its prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianVariational {
    pub mu: Array2<f64>,
    /// Pre-scale; `σ = softplus(ρ)`.
    pub rho: Array2<f64>,
    pub prior_mu: Array2<f64>,
    pub prior_sigma: Array2<f64>,
}

impl GaussianVariational {
    /// Posterior and prior both centred at `mu` with scale `sigma`.
    pub fn centred(mu: Array2<f64>, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::validation("sigma must be positive"));
        }
        let rho = softplus_inv(sigma);
        let shape = mu.dim();
        Ok(Self {
            prior_mu: mu.clone(),
            mu,
            rho: Array2::from_elem(shape, rho),
            prior_sigma: Array2::from_elem(shape, softplus(rho)),
        })
    }

    /// Posterior around `mu` with scale `sigma`, prior `N(0, prior_sigma²)`.
    pub fn with_standard_prior(mu: Array2<f64>, sigma: f64, prior_sigma: f64) -> Result<Self> {
        if !(prior_sigma.is_finite() && prior_sigma > 0.0) {
            return Err(Error::validation("prior sigma must be positive"));
        }
        let mut v = Self::centred(mu, sigma)?;
        v.prior_mu.fill(0.0);
        v.prior_sigma.fill(prior_sigma);
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.mu.dim();
        for (name, t) in [("rho", &self.rho), ("prior_mu", &self.prior_mu), ("prior_sigma", &self.prior_sigma)] {
            if t.dim() != shape {
                return Err(Error::validation(format!(
                    "{name} shape {:?} differs from mu shape {:?}",
                    t.dim(),
                    shape
                )));
            }
        }
        if self.prior_sigma.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::validation("prior_sigma entries must be positive"));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mu.dim()
    }

    pub fn sigma(&self) -> Array2<f64> {
        self.rho.mapv(softplus)
    }

    /// Reparameterized draw `μ + σ ⊙ ε`.
    pub fn sample_with(&self, eps: &Array2<f64>) -> Array2<f64> {
        let mut w = self.mu.clone();
        Zip::from(&mut w)
            .and(&self.rho)
            .and(eps)
            .for_each(|w, &r, &e| *w += softplus(r) * e);
        w
    }
}

/// Closed-form `KL(q ‖ p)` summed over all entries.
pub fn kl_to_prior(v: &GaussianVariational) -> f64 {
    gaussian_kl_sum(&v.mu, &v.rho, &v.prior_mu, &v.prior_sigma)
}

/// Point-weight affine layer `x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `fan_in × fan_out`
    pub weight: Array2<f64>,
    /// `1 × fan_out`
    pub bias: Array2<f64>,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("valid range");
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng)),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array2::zeros((1, dim)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + self.bias.row(0)
    }
}

/// Affine layer with Bayesian weights and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesAffineLayer {
    /// `fan_in × fan_out`
    pub weight: GaussianVariational,
    /// `1 × fan_out`
    pub bias: GaussianVariational,
}

/// Standard-normal draws for one Bayesian layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl LayerNoise {
    pub fn draw(layer: &BayesAffineLayer, rng: &mut impl Rng) -> Self {
        let mut n = |shape: (usize, usize)| Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng));
        Self {
            weight: n(layer.weight.shape()),
            bias: n(layer.bias.shape()),
        }
    }

    pub fn zeros(layer: &BayesAffineLayer) -> Self {
        Self {
            weight: Array2::zeros(layer.weight.shape()),
            bias: Array2::zeros(layer.bias.shape()),
        }
    }
}

impl BayesAffineLayer {
    pub fn new(weight: GaussianVariational, bias: GaussianVariational) -> Result<Self> {
        weight.validate()?;
        bias.validate()?;
        if bias.shape() != (1, weight.shape().1) {
            return Err(Error::validation(format!(
                "bias shape {:?} does not match fan_out {}",
                bias.shape(),
                weight.shape().1
            )));
        }
        Ok(Self { weight, bias })
    }

    /// Posterior means from a dense layer, posterior scale `sigma`, prior
    /// `N(0, prior_sigma²)`.
    pub fn from_dense(dense: &DenseLayer, sigma: f64, prior_sigma: f64) -> Result<Self> {
        Self::new(
            GaussianVariational::with_standard_prior(dense.weight.clone(), sigma, prior_sigma)?,
            GaussianVariational::with_standard_prior(dense.bias.clone(), sigma, prior_sigma)?,
        )
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape().0
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape().1
    }

    pub fn kl(&self) -> f64 {
        kl_to_prior(&self.weight) + kl_to_prior(&self.bias)
    }

    /// Layer with the posterior means as point weights.
    pub fn mean_layer(&self) -> DenseLayer {
        DenseLayer {
            weight: self.weight.mu.clone(),
            bias: self.bias.mu.clone(),
        }
    }

    pub fn sample(&self, noise: &LayerNoise) -> DenseLayer {
        DenseLayer {
            weight: self.weight.sample_with(&noise.weight),
            bias: self.bias.sample_with(&noise.bias),
        }
    }
}

fn moped_tensor(w: &Array2<f64>, delta: f64, floor: f64) -> GaussianVariational {
    let rho = w.mapv(|v| softplus_inv((delta * v.abs()).max(floor)));
    GaussianVariational {
        mu: w.clone(),
        prior_mu: w.clone(),
        // Stored as softplus(rho) so that q = p holds exactly at initialization.
        prior_sigma: rho.mapv(softplus),
        rho,
    }
}

/// MOPED initialization from point weights `w_dnn`: prior
/// `N(w_dnn, max(δ|w_dnn|, floor))`, posterior initialized equal to the prior.
pub fn moped_init(
    layer: &BayesAffineLayer,
    w_dnn: &DenseLayer,
    delta: f64,
    sigma_floor: f64,
) -> Result<BayesAffineLayer> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::validation("MOPED delta must be positive"));
    }
    if !(sigma_floor.is_finite() && sigma_floor > 0.0) {
        return Err(Error::validation("sigma floor must be positive"));
    }
    if w_dnn.weight.dim() != layer.weight.shape() || w_dnn.bias.dim() != layer.bias.shape() {
        return Err(Error::validation(format!(
            "MOPED weights {:?}/{:?} do not match layer {:?}/{:?}",
            w_dnn.weight.dim(),
            w_dnn.bias.dim(),
            layer.weight.shape(),
            layer.bias.shape()
        )));
    }
    BayesAffineLayer::new(
        moped_tensor(&w_dnn.weight, delta, sigma_floor),
        moped_tensor(&w_dnn.bias, delta, sigma_floor),
    )
}

/// Deterministic metric network applied row-wise to embedding samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricNet {
    pub layers: Vec<DenseLayer>,
    /// Whether a ReLU follows each layer.
    pub relu: Vec<bool>,
}

impl MetricNet {
    pub fn new(layers: Vec<DenseLayer>, relu: Vec<bool>) -> Result<Self> {
        if layers.is_empty() || layers.len() != relu.len() {
            return Err(Error::validation("metric net needs one activation flag per layer"));
        }
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::shape("metric net layers", w[0].fan_out(), w[1].fan_in()));
            }
        }
        Ok(Self { layers, relu })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("metric net input", self.input_dim(), x.ncols()));
        }
        let mut h = x.clone();
        for (layer, &relu) in self.layers.iter().zip(&self.relu) {
            h = layer.forward(&h);
            if relu {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }
}

/// Applies the metric network to every Monte Carlo sample of `e`.
pub fn metric_forward(metric: &MetricNet, e: &ProbEmbedding) -> Result<ProbEmbedding> {
    ProbEmbedding::new(metric.forward(&e.samples().to_owned())?)
}

/// Layer widths of a [`NetworkStack`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the deterministic backbone layers.
    pub backbone: Vec<usize>,
    pub latent_dim: usize,
    pub n_classes: usize,
    /// Hidden widths of the metric network.
    pub metric_hidden: Vec<usize>,
    pub metric_out: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 8,
            backbone: vec![32],
            latent_dim: 16,
            n_classes: 3,
            metric_hidden: vec![16],
            metric_out: 8,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.latent_dim, self.n_classes, self.metric_out];
        if dims.iter().chain(&self.backbone).chain(&self.metric_hidden).any(|&d| d == 0) {
            return Err(Error::validation("architecture widths must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::validation("need at least two classes"));
        }
        Ok(())
    }
}

/// How Bayesian weights are drawn across the rows of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawMode {
    /// One weight draw per pass, shared by every row.
    #[default]
    PerPass,
    /// An independent weight draw for every row and pass.
    PerItem,
}

/// Noise for one stochastic pass through both Bayesian layers.
#[derive(Debug, Clone, PartialEq)]
pub struct PassNoise {
    pub extractor: LayerNoise,
    pub classifier: LayerNoise,
}

impl PassNoise {
    /// Draws both layers from one stream.
    pub fn draw(stack: &NetworkStack, rng: &mut impl Rng) -> Self {
        let extractor = LayerNoise::draw(&stack.extractor, rng);
        let classifier = LayerNoise::draw(&stack.classifier, rng);
        Self {
            extractor,
            classifier,
        }
    }

    /// Draws the extractor and classifier noise from separate streams.
    pub fn draw_decoupled(stack: &NetworkStack, ext_rng: &mut impl Rng, cls_rng: &mut impl Rng) -> Self {
        Self {
            extractor: LayerNoise::draw(&stack.extractor, ext_rng),
            classifier: LayerNoise::draw(&stack.classifier, cls_rng),
        }
    }

    pub fn zeros(stack: &NetworkStack) -> Self {
        Self {
            extractor: LayerNoise::zeros(&stack.extractor),
            classifier: LayerNoise::zeros(&stack.classifier),
        }
    }
}

/// Extractor `Q_φ`, classifier `C_ω` and metric network `M_Θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkStack {
    pub backbone: Vec<DenseLayer>,
    pub extractor: BayesAffineLayer,
    pub classifier: BayesAffineLayer,
    pub metric: MetricNet,
}

fn check_finite(x: &Array2<f64>, layer: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow { layer })
    }
}

impl NetworkStack {
    pub fn new(
        backbone: Vec<DenseLayer>,
        extractor: BayesAffineLayer,
        classifier: BayesAffineLayer,
        metric: MetricNet,
    ) -> Result<Self> {
        let mut width = None;
        for layer in &backbone {
            if let Some(w) = width {
                if w != layer.fan_in() {
                    return Err(Error::shape("backbone layers", w, layer.fan_in()));
                }
            }
            width = Some(layer.fan_out());
        }
        if let Some(w) = width {
            if w != extractor.fan_in() {
                return Err(Error::shape("extractor input", w, extractor.fan_in()));
            }
        }
        if extractor.fan_out() != classifier.fan_in() {
            return Err(Error::shape("classifier input", extractor.fan_out(), classifier.fan_in()));
        }
        if extractor.fan_out() != metric.input_dim() {
            return Err(Error::shape("metric input", extractor.fan_out(), metric.input_dim()));
        }
        Ok(Self {
            backbone,
            extractor,
            classifier,
            metric,
        })
    }

    /// Random initialization: Glorot point weights, Bayesian posteriors of
    /// scale `init_sigma` around them with `N(0, 1)` priors.
    pub fn init(arch: &Architecture, init_sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut backbone = Vec::new();
        let mut width = arch.input_dim;
        for &h in &arch.backbone {
            backbone.push(DenseLayer::init(width, h, rng));
            width = h;
        }
        let extractor = BayesAffineLayer::from_dense(&DenseLayer::init(width, arch.latent_dim, rng), init_sigma, 1.0)?;
        let classifier =
            BayesAffineLayer::from_dense(&DenseLayer::init(arch.latent_dim, arch.n_classes, rng), init_sigma, 1.0)?;
        let mut layers = Vec::new();
        let mut relu = Vec::new();
        let mut width = arch.latent_dim;
        for &h in &arch.metric_hidden {
            layers.push(DenseLayer::init(width, h, rng));
            relu.push(true);
            width = h;
        }
        layers.push(DenseLayer::init(width, arch.metric_out, rng));
        relu.push(false);
        Self::new(backbone, extractor, classifier, MetricNet::new(layers, relu)?)
    }

    pub fn input_dim(&self) -> usize {
        self.backbone
            .first()
            .map(DenseLayer::fan_in)
            .unwrap_or_else(|| self.extractor.fan_in())
    }

    pub fn latent_dim(&self) -> usize {
        self.extractor.fan_out()
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    /// Deterministic trunk below the Bayesian extractor layer.
    pub fn backbone_forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.ncols()));
        }
        let mut h = x.clone();
        for (i, layer) in self.backbone.iter().enumerate() {
            h = layer.forward(&h);
            h.mapv_inplace(|v| v.max(0.0));
            check_finite(&h, i)?;
        }
        Ok(h)
    }

    /// Extractor and classifier heads on backbone features with fixed noise.
    fn heads(&self, h: &Array2<f64>, noise: &PassNoise) -> Result<(Array2<f64>, Array2<f64>)> {
        let l = self.backbone.len();
        let mut z = self.extractor.sample(&noise.extractor).forward(h);
        z.mapv_inplace(|v| v.max(0.0));
        check_finite(&z, l)?;
        let logits = self.classifier.sample(&noise.classifier).forward(&z);
        check_finite(&logits, l + 1)?;
        Ok((z, logits))
    }

    /// One pass over a batch with the given noise: `(latent, logits)`.
    pub fn forward_with_noise(&self, x: &Array2<f64>, noise: &PassNoise) -> Result<(Array2<f64>, Array2<f64>)> {
        let h = self.backbone_forward(x)?;
        self.heads(&h, noise)
    }

    /// Pass with every Bayesian weight at its posterior mean.
    pub fn mean_forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.forward_with_noise(x, &PassNoise::zeros(self))
    }

    /// `T` stochastic passes over a batch. Returns one embedding per row and
    /// the per-pass class probabilities (`T` matrices of shape `N × m`).
    pub fn forward_prob_batch(
        &self,
        x: &Array2<f64>,
        t_passes: usize,
        mode: DrawMode,
        rng: &mut impl Rng,
    ) -> Result<(Vec<ProbEmbedding>, Vec<Array2<f64>>)> {
        if t_passes == 0 {
            return Err(Error::validation("T must be at least 1"));
        }
        let h = self.backbone_forward(x)?;
        let n = x.nrows();
        let mut latents = vec![Array2::zeros((t_passes, self.latent_dim())); n];
        let mut probs = Vec::with_capacity(t_passes);
        for t in 0..t_passes {
            let (z, logits) = match mode {
                DrawMode::PerPass => self.heads(&h, &PassNoise::draw(self, rng))?,
                DrawMode::PerItem => {
                    let mut z = Array2::zeros((n, self.latent_dim()));
                    let mut logits = Array2::zeros((n, self.n_classes()));
                    for i in 0..n {
                        let row = h.row(i).insert_axis(ndarray::Axis(0)).to_owned();
                        let (zi, li) = self.heads(&row, &PassNoise::draw(self, rng))?;
                        z.row_mut(i).assign(&zi.row(0));
                        logits.row_mut(i).assign(&li.row(0));
                    }
                    (z, logits)
                }
            };
            for (i, lat) in latents.iter_mut().enumerate() {
                lat.row_mut(t).assign(&z.row(i));
            }
            probs.push(softmax_rows(&logits));
        }
        let embeddings = latents
            .into_iter()
            .map(ProbEmbedding::new)
            .collect::<Result<Vec<_>>>()?;
        Ok((embeddings, probs))
    }
}

fn single_row(x: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector")
}

/// One stochastic pass for a single input: `(z, logits)`.
pub fn sample_forward(stack: &NetworkStack, x: &[f64], rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("input must be finite"));
    }
    let noise = PassNoise::draw(stack, rng);
    let (z, logits) = stack.forward_with_noise(&single_row(x), &noise)?;
    Ok((z.row(0).to_vec(), logits.row(0).to_vec()))
}

/// `T` stochastic passes for a single input: the probabilistic embedding and
/// the per-pass class probabilities.
pub fn forward_prob(
    stack: &NetworkStack,
    x: &[f64],
    t_passes: usize,
    rng: &mut impl Rng,
) -> Result<(ProbEmbedding, Vec<Vec<f64>>)> {
    if t_passes == 0 {
        return Err(Error::validation("T must be at least 1"));
    }
    let input = single_row(x);
    let mut rows = Vec::with_capacity(t_passes);
    let mut probs = Vec::with_capacity(t_passes);
    for _ in 0..t_passes {
        let noise = PassNoise::draw(stack, rng);
        let (z, logits) = stack.forward_with_noise(&input, &noise)?;
        rows.push(z.row(0).to_vec());
        probs.push(softmax_rows(&logits).row(0).to_vec());
    }
    Ok((ProbEmbedding::from_rows(&rows)?, probs))
}

/// Mean of the per-pass probability vectors.
pub fn predict_expected(per_pass: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_pass
        .first()
        .ok_or_else(|| Error::validation("need at least one probability vector"))?;
    let m = first.len();
    let mut out = Array1::<f64>::zeros(m);
    for p in per_pass {
        if p.len() != m {
            return Err(Error::shape("predict_expected", m, p.len()));
        }
        out += &Array1::from(p.clone());
    }
    out /= per_pass.len() as f64;
    Ok(out.to_vec())
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}
