//! Training loop, optimizer and leave-one-domain-out evaluation.
//!
//! One iteration draws a minibatch from every source domain, runs `T`
//! stochastic passes, samples contrastive pairs, evaluates
//! `Σ L_c + KL_Q + KL_C + β₁ L_local + β₂ L_global` and takes an Adam step.
//! Every random quantity comes from a stream keyed by the root seed and the
//! iteration (see [`crate::rng`]), and domains are processed in order of
//! their stream id, so the listing order of the sources does not matter.

mod gradcheck;
mod objective;
mod optim;

pub use gradcheck::{finite_difference_check, relative_error, Component, GradCheckReport};
pub use objective::{compute_gradients, Batch, IterationDraws, Objective, ObjectiveParts};
pub use optim::{adam_step, assign_parameters, flatten_parameters, parameter_layout, AdamState, GradientVector, ParamBlock};

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use ndarray::Array2;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph};
use crate::bayes_net::graph::{backbone, heads};
use crate::bayes_net::{entropy, moped_init, predict_expected, Architecture, DrawMode, NetworkStack};
use crate::error::{Error, Result};
use crate::kernel::KernelConfig;
use crate::losses::{total_objective, ClassificationKind, LocalVariant, LossComponents, LossWeights};
use crate::prob_embedding::GlobalMode;
use crate::rng::{stream, Stream};

/// Global alignment flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalVariant {
    /// P-MMD over probabilistic embeddings.
    #[default]
    Pmmd,
    /// Point-set MMD over the Monte Carlo means.
    MeanEmbedding,
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub global_variant: GlobalVariant,
    pub local_variant: LocalVariant,
    pub disable_local: bool,
    pub disable_global: bool,
    /// Bayesian weights fixed at their means, one pass, no KL.
    pub deterministic_mode: bool,
}

impl Ablation {
    pub const FLAGS: [&'static str; 5] =
        ["mean_embedding", "mean_csa", "disable_local", "disable_global", "deterministic_mode"];

    /// Applies a comma-separated flag list such as
    /// `deterministic_mode,disable_local`.
    pub fn apply_flags(&mut self, list: &str) -> Result<()> {
        for flag in list.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match flag {
                "mean_embedding" => self.global_variant = GlobalVariant::MeanEmbedding,
                "mean_csa" => self.local_variant = LocalVariant::MeanEmbedding,
                "disable_local" => self.disable_local = true,
                "disable_global" => self.disable_global = true,
                "deterministic_mode" => self.deterministic_mode = true,
                other => {
                    return Err(Error::validation(format!(
                        "unknown ablation flag {other:?} (expected one of {})",
                        Self::FLAGS.join(", ")
                    )))
                }
            }
        }
        Ok(())
    }

    /// The supervised baseline: no alignment, point weights.
    pub fn erm() -> Self {
        Self {
            disable_local: true,
            disable_global: true,
            deterministic_mode: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Priors centred at briefly pretrained point weights.
    #[default]
    Moped,
    /// `N(0, 1)` priors.
    Standard,
}

/// Architecture widths and prior initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub prior: PriorMode,
    pub moped_delta: f64,
    pub sigma_floor: f64,
    /// Posterior scale before pretraining (and the scale kept in standard mode).
    pub init_sigma: f64,
    /// Deterministic pretraining steps on pooled sources; 0 disables.
    pub pretrain_iterations: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub backbone: Vec<usize>,
    pub latent_dim: usize,
    pub metric_hidden: Vec<usize>,
    pub metric_out: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            prior: PriorMode::Moped,
            moped_delta: 0.1,
            sigma_floor: crate::bayes_net::DEFAULT_SIGMA_FLOOR,
            init_sigma: 1e-3,
            pretrain_iterations: 200,
            pretrain_lr: 1e-2,
            pretrain_batch: 64,
            backbone: arch.backbone,
            latent_dim: arch.latent_dim,
            metric_hidden: arch.metric_hidden,
            metric_out: arch.metric_out,
        }
    }
}

impl InitConfig {
    pub fn architecture(&self, input_dim: usize, n_classes: usize) -> Architecture {
        Architecture {
            input_dim,
            backbone: self.backbone.clone(),
            latent_dim: self.latent_dim,
            n_classes,
            metric_hidden: self.metric_hidden.clone(),
            metric_out: self.metric_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_per_domain: usize,
    pub iterations: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub global_mode: GlobalMode,
    pub kernel: KernelConfig,
    pub ablation: Ablation,
    pub classification: ClassificationKind,
    pub focal_gamma: f64,
    /// Target count of positive and of negative pairs per iteration.
    pub n_pairs: usize,
    /// Feed the metric network a gradient-free copy of the embeddings.
    pub detach_metric_input: bool,
    /// Draw classifier noise from its own stream.
    pub decouple_noise: bool,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_per_domain: 16,
            iterations: 300,
            seed: 0,
            weights: LossWeights::default(),
            global_mode: GlobalMode::Quadratic,
            kernel: KernelConfig::default(),
            ablation: Ablation::default(),
            classification: ClassificationKind::CrossEntropy,
            focal_gamma: 2.0,
            n_pairs: 16,
            detach_metric_input: false,
            decouple_noise: false,
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::validation("learning_rate must be finite and >= 0"));
        }
        if self.batch_per_domain == 0 {
            return Err(Error::validation("batch_per_domain must be positive"));
        }
        if self.n_pairs == 0 {
            return Err(Error::validation("n_pairs must be positive"));
        }
        if !(self.focal_gamma.is_finite() && self.focal_gamma >= 0.0) {
            return Err(Error::validation("focal_gamma must be finite and >= 0"));
        }
        self.weights.validate().map_err(|e| e.in_field("weights"))?;
        self.kernel.validate().map_err(|e| e.in_field("kernel"))?;
        let i = &self.init;
        for (name, v) in [("moped_delta", i.moped_delta), ("sigma_floor", i.sigma_floor), ("init_sigma", i.init_sigma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("init.{name} must be positive")));
            }
        }
        if !(i.pretrain_lr.is_finite() && i.pretrain_lr >= 0.0) {
            return Err(Error::validation("init.pretrain_lr must be finite and >= 0"));
        }
        if i.pretrain_batch == 0 {
            return Err(Error::validation("init.pretrain_batch must be positive"));
        }
        if i.latent_dim == 0 || i.metric_out == 0 || i.backbone.iter().chain(&i.metric_hidden).any(|&w| w == 0) {
            return Err(Error::validation("init widths must be positive"));
        }
        Ok(())
    }

    /// Loss weights after ablation switches: disabled terms get weight 0 and
    /// deterministic mode drops the KL terms.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.disable_local {
            w.beta1 = 0.0;
        }
        if self.ablation.disable_global {
            w.beta2 = 0.0;
        }
        if self.ablation.deterministic_mode {
            w.kl_scale = 0.0;
        }
        w
    }
}

/// One domain's labeled samples and the id of its random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDomain {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
    pub stream_id: u64,
}

impl LabeledDomain {
    pub fn new(x: Array2<f64>, labels: Vec<usize>, stream_id: u64) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::shape("domain labels", x.nrows(), labels.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("domain features must be finite"));
        }
        Ok(Self { x, labels, stream_id })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn rows(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select(ndarray::Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Loss components of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub model: NetworkStack,
    pub log: Vec<LossRecord>,
}

fn check_sources(sources: &[LabeledDomain], stack: &NetworkStack) -> Result<Vec<usize>> {
    if sources.len() < 2 {
        return Err(Error::validation(format!("need at least two source domains, got {}", sources.len())));
    }
    for (i, s) in sources.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::validation(format!("source domain {i} is empty")));
        }
        if s.dim() != stack.input_dim() {
            return Err(Error::shape("source features", stack.input_dim(), s.dim()));
        }
        if let Some(&y) = s.labels.iter().find(|&&y| y >= stack.n_classes()) {
            return Err(Error::validation(format!("source domain {i} has label {y} >= {}", stack.n_classes())));
        }
    }
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by_key(|&i| sources[i].stream_id);
    if order.windows(2).any(|w| sources[w[0]].stream_id == sources[w[1]].stream_id) {
        return Err(Error::validation("source domains need distinct stream ids"));
    }
    Ok(order)
}

fn draw_batch(cfg: &TrainConfig, d: &LabeledDomain, iteration: u64) -> Batch {
    let mut rng = stream(cfg.seed, Stream::Batch, &[iteration, d.stream_id]);
    let idx = sample(&mut rng, d.len(), cfg.batch_per_domain.min(d.len())).into_vec();
    d.rows(&idx)
}

/// Deterministic pretraining of the backbone and the Bayesian means on
/// pooled sources, with mean cross-entropy.
fn pretrain(cfg: &TrainConfig, sources: &[&LabeledDomain], stack: &mut NetworkStack) -> Result<()> {
    let init = &cfg.init;
    let pooled_x: Vec<_> = sources.iter().map(|s| s.x.view()).collect();
    let x = ndarray::concatenate(ndarray::Axis(0), &pooled_x).expect("equal widths");
    let labels: Vec<usize> = sources.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let pooled = LabeledDomain::new(x, labels, 0)?;
    let mut state = AdamState::new(stack.n_parameters());
    for step in 0..init.pretrain_iterations {
        let mut rng = stream(cfg.seed, Stream::Pretrain, &[step as u64]);
        let idx = sample(&mut rng, pooled.len(), init.pretrain_batch.min(pooled.len())).into_vec();
        let batch = pooled.rows(&idx);
        let mut g = Graph::new();
        let vars = stack.register(&mut g);
        let xv = g.leaf(batch.x);
        let h = backbone(&mut g, &vars, xv);
        let (_, logits) = heads(&mut g, &vars, h, None);
        let p = g.softmax_rows(logits);
        let n = batch.labels.len() as f64;
        let loss = g.class_loss(p, batch.labels, cfg.classification, cfg.focal_gamma);
        let loss = g.scale(loss, 1.0 / n);
        if !g.scalar(loss).is_finite() {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}")));
        }
        let grad = GradientVector::from_graph(stack, &vars.ordered(), &g.backward(loss))?;
        let mut flat = flatten_parameters(stack);
        adam_step(&mut flat, &grad.values, &mut state, init.pretrain_lr)?;
        assign_parameters(stack, &flat)?;
        if step % 50 == 0 {
            debug!("pretrain step {step}: loss {:.6}", g.scalar(loss));
        }
    }
    Ok(())
}

/// Builds the initial model: random weights, optional deterministic
/// pretraining, then MOPED priors (or `N(0, 1)` priors).
pub fn initialize_model(cfg: &TrainConfig, sources: &[LabeledDomain], n_classes: usize) -> Result<NetworkStack> {
    cfg.validate()?;
    let first = sources.first().ok_or_else(|| Error::validation("no source domains"))?;
    let arch = cfg.init.architecture(first.dim(), n_classes);
    let mut stack = NetworkStack::init(&arch, cfg.init.init_sigma, &mut stream(cfg.seed, Stream::Init, &[]))?;
    let order = check_sources(sources, &stack)?;
    let ordered: Vec<&LabeledDomain> = order.iter().map(|&i| &sources[i]).collect();
    if cfg.init.pretrain_iterations > 0 {
        pretrain(cfg, &ordered, &mut stack)?;
    }
    if cfg.init.prior == PriorMode::Moped {
        let (delta, floor) = (cfg.init.moped_delta, cfg.init.sigma_floor);
        stack.extractor = moped_init(&stack.extractor, &stack.extractor.mean_layer(), delta, floor)?;
        stack.classifier = moped_init(&stack.classifier, &stack.classifier.mean_layer(), delta, floor)?;
    }
    Ok(stack)
}

/// Minibatches of one iteration, in stream-id order.
pub fn iteration_batches(cfg: &TrainConfig, sources: &[LabeledDomain], iteration: u64) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by_key(|&i| sources[i].stream_id);
    Ok(order.iter().map(|&i| draw_batch(cfg, &sources[i], iteration)).collect())
}

/// Trains `model` on the source domains.
pub fn fit(cfg: &TrainConfig, sources: &[LabeledDomain], model: NetworkStack) -> Result<FitOutput> {
    cfg.validate()?;
    let order = check_sources(sources, &model)?;
    let mut model = model;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut state = AdamState::new(model.n_parameters());
    let weights = cfg.effective_weights();
    for it in 0..cfg.iterations {
        let batches: Vec<Batch> = order.iter().map(|&i| draw_batch(cfg, &sources[i], it as u64)).collect();
        let draws = IterationDraws::draw(cfg, &model, &batches, it as u64)?;
        let obj = Objective::build(cfg, &model, &batches, &draws)?;
        let components = obj.components();
        let total = total_objective(&components, &weights)?;
        let grad = obj.gradient(&model, obj.parts.total)?;
        let mut flat = flatten_parameters(&model);
        adam_step(&mut flat, &grad.values, &mut state, cfg.learning_rate)?;
        assign_parameters(&mut model, &flat)?;
        if it % 50 == 0 || it + 1 == cfg.iterations {
            debug!(
                "iter {it}: L_c {:.5} KL {:.5}/{:.5} local {:.5} global {:.5} total {:.5}",
                components.classification,
                components.kl_extractor,
                components.kl_classifier,
                components.local,
                components.global,
                total
            );
        }
        log.push(LossRecord {
            iteration: it,
            components,
            total,
        });
    }
    info!("trained {} iterations on {} source domains", cfg.iterations, sources.len());
    Ok(FitOutput { model, log })
}

#[derive(Serialize)]
struct CsvRow {
    iteration: usize,
    #[serde(rename = "L_c")]
    classification: f64,
    #[serde(rename = "KL_Q")]
    kl_extractor: f64,
    #[serde(rename = "KL_C")]
    kl_classifier: f64,
    #[serde(rename = "L_local")]
    local: f64,
    #[serde(rename = "L_global")]
    global: f64,
    total: f64,
}

/// Writes the loss log as CSV: `iteration,L_c,KL_Q,KL_C,L_local,L_global,total`.
pub fn write_loss_csv<W: Write>(log: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in log {
        let c = r.components;
        w.serialize(CsvRow {
            iteration: r.iteration,
            classification: c.classification,
            kl_extractor: c.kl_extractor,
            kl_classifier: c.kl_classifier,
            local: c.local,
            global: c.global,
            total: r.total,
        })
        .map_err(|e| Error::validation(format!("loss log encode: {e}")))?;
    }
    if log.is_empty() {
        w.write_record(["iteration", "L_c", "KL_Q", "KL_C", "L_local", "L_global", "total"])
            .map_err(|e| Error::validation(format!("loss log encode: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<loss log>", e))
}

pub fn save_loss_csv(log: &[LossRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_loss_csv(log, std::io::BufWriter::new(file))
}

/// Held-out metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated domain.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub mean_entropy: f64,
    pub n_samples: usize,
    /// Accuracy of always predicting the most frequent class.
    pub majority_baseline: f64,
}

/// Expected class probabilities for every row of `x`.
pub fn predict_proba(cfg: &TrainConfig, model: &NetworkStack, x: &Array2<f64>, stream_id: u64) -> Result<Array2<f64>> {
    if cfg.ablation.deterministic_mode {
        let (_, logits) = model.mean_forward(x)?;
        return Ok(softmax_rows(&logits));
    }
    let mut rng = stream(cfg.seed, Stream::Eval, &[stream_id]);
    let (_, per_pass) = model.forward_prob_batch(x, cfg.weights.t_passes, DrawMode::PerPass, &mut rng)?;
    let mut out = Array2::zeros((x.nrows(), model.n_classes()));
    for i in 0..x.nrows() {
        let rows: Vec<Vec<f64>> = per_pass.iter().map(|p| p.row(i).to_vec()).collect();
        out.row_mut(i).assign(&ndarray::Array1::from(predict_expected(&rows)?));
    }
    Ok(out)
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Accuracy, per-class accuracy and mean predictive entropy on one domain.
pub fn evaluate_domain(cfg: &TrainConfig, model: &NetworkStack, domain: &LabeledDomain) -> Result<EvalMetrics> {
    if domain.is_empty() {
        return Err(Error::validation("cannot evaluate an empty domain"));
    }
    let m = model.n_classes();
    if let Some(&y) = domain.labels.iter().find(|&&y| y >= m) {
        return Err(Error::validation(format!("label {y} >= {m} classes")));
    }
    let probs = predict_proba(cfg, model, &domain.x, domain.stream_id)?;
    let mut correct = vec![0usize; m];
    let mut count = vec![0usize; m];
    let mut entropy_sum = 0.0;
    for (i, &y) in domain.labels.iter().enumerate() {
        let row = probs.row(i);
        count[y] += 1;
        if argmax(row) == y {
            correct[y] += 1;
        }
        entropy_sum += entropy(row.as_slice().expect("contiguous"));
    }
    let n = domain.len();
    Ok(EvalMetrics {
        accuracy: correct.iter().sum::<usize>() as f64 / n as f64,
        per_class_accuracy: correct
            .iter()
            .zip(&count)
            .map(|(&c, &k)| (k > 0).then(|| c as f64 / k as f64))
            .collect(),
        mean_entropy: entropy_sum / n as f64,
        n_samples: n,
        majority_baseline: *count.iter().max().expect("m >= 2") as f64 / n as f64,
    })
}

/// Evaluates a model trained on all domains but `held_out` on that domain.
pub fn evaluate_lodo(
    cfg: &TrainConfig,
    model: &NetworkStack,
    domains: &[LabeledDomain],
    held_out: usize,
) -> Result<EvalMetrics> {
    let target = domains.get(held_out).ok_or_else(|| {
        Error::validation(format!("held-out index {held_out} out of range for {} domains", domains.len()))
    })?;
    evaluate_domain(cfg, model, target)
}

/// Full leave-one-domain-out run: initialize, train on every domain but
/// `held_out`, evaluate on it.
pub fn train_lodo(
    cfg: &TrainConfig,
    domains: &[LabeledDomain],
    held_out: usize,
    n_classes: usize,
) -> Result<(FitOutput, EvalMetrics)> {
    if held_out >= domains.len() {
        return Err(Error::validation(format!(
            "held-out index {held_out} out of range for {} domains",
            domains.len()
        )));
    }
    let sources: Vec<LabeledDomain> = domains
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != held_out)
        .map(|(_, d)| d.clone())
        .collect();
    let model = initialize_model(cfg, &sources, n_classes)?;
    let out = fit(cfg, &sources, model)?;
    let metrics = evaluate_lodo(cfg, &out.model, domains, held_out)?;
    Ok((out, metrics))
}

#[cfg(test)]
mod tests;
