use super::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Three-class Gaussian blobs in `d` dimensions, shifted per domain.
fn blobs(n_domains: usize, per_domain: usize, d: usize, shift: f64, seed: u64) -> Vec<LabeledDomain> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_domains)
        .map(|k| {
            let labels: Vec<usize> = (0..per_domain).map(|i| i % 3).collect();
            let x = Array2::from_shape_fn((per_domain, d), |(i, j)| {
                let centre = if j == labels[i] { 2.0 } else { 0.0 };
                let noise: f64 = StandardNormal.sample(&mut rng);
                centre + 0.3 * noise + shift * k as f64 * if j == 0 { 1.0 } else { 0.0 }
            });
            LabeledDomain::new(x, labels, k as u64).unwrap()
        })
        .collect()
}

fn small_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.batch_per_domain = 6;
    cfg.iterations = 5;
    cfg.learning_rate = 1e-3;
    cfg.weights.t_passes = 3;
    cfg.n_pairs = 4;
    cfg.init.pretrain_iterations = 20;
    cfg.init.backbone = vec![8];
    cfg.init.latent_dim = 6;
    cfg.init.metric_hidden = vec![6];
    cfg.init.metric_out = 4;
    cfg
}

#[test]
fn zero_iterations_return_model_unchanged() {
    let mut cfg = small_cfg();
    cfg.iterations = 0;
    let sources = blobs(2, 12, 4, 0.5, 1);
    let model = initialize_model(&cfg, &sources, 3).unwrap();
    let out = fit(&cfg, &sources, model.clone()).unwrap();
    assert_eq!(out.model, model);
    assert!(out.log.is_empty());
}

#[test]
fn zero_learning_rate_is_bit_identical() {
    let mut cfg = small_cfg();
    cfg.learning_rate = 0.0;
    let sources = blobs(3, 12, 4, 0.5, 2);
    let model = initialize_model(&cfg, &sources, 3).unwrap();
    let out = fit(&cfg, &sources, model.clone()).unwrap();
    assert_eq!(out.model, model);
    assert_eq!(out.log.len(), 5);
}

#[test]
fn fit_is_deterministic_and_logs_all_components() {
    let cfg = small_cfg();
    let sources = blobs(3, 12, 4, 0.5, 3);
    let run = || {
        let model = initialize_model(&cfg, &sources, 3).unwrap();
        fit(&cfg, &sources, model).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let mut csv_a = Vec::new();
    write_loss_csv(&a.log, &mut csv_a).unwrap();
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.starts_with("iteration,L_c,KL_Q,KL_C,L_local,L_global,total\n"));
    assert_eq!(text.lines().count(), 6);
    for r in &a.log {
        let c = r.components;
        assert!([c.classification, c.kl_extractor, c.kl_classifier, c.local, c.global, r.total]
            .iter()
            .all(|v| v.is_finite()));
        assert!(c.global > 0.0 && c.local > 0.0);
    }
}

#[test]
fn permuting_domains_with_their_streams_reproduces_training() {
    let cfg = small_cfg();
    let sources = blobs(3, 12, 4, 0.5, 4);
    let permuted = vec![sources[2].clone(), sources[0].clone(), sources[1].clone()];
    let run = |s: &[LabeledDomain]| {
        let model = initialize_model(&cfg, s, 3).unwrap();
        fit(&cfg, s, model).unwrap()
    };
    let (a, b) = (run(&sources), run(&permuted));
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
}

#[test]
fn source_validation() {
    let cfg = small_cfg();
    let sources = blobs(2, 6, 4, 0.0, 5);
    let model = initialize_model(&cfg, &sources, 3).unwrap();
    assert!(fit(&cfg, &sources[..1], model.clone()).is_err());
    let mut empty = sources.clone();
    empty[1] = LabeledDomain::new(Array2::zeros((0, 4)), vec![], 1).unwrap();
    assert!(fit(&cfg, &empty, model.clone()).is_err());
    let mut dup = sources.clone();
    dup[1].stream_id = 0;
    assert!(fit(&cfg, &dup, model).is_err());
}

fn toy_objective(cfg: &TrainConfig, seed: u64) -> (NetworkStack, Vec<Batch>, IterationDraws) {
    let sources = blobs(2, 8, 3, 0.7, seed);
    let model = initialize_model(cfg, &sources, 3).unwrap();
    let batches = iteration_batches(cfg, &sources, 0).unwrap();
    let draws = IterationDraws::draw(cfg, &model, &batches, 0).unwrap();
    (model, batches, draws)
}

#[test]
fn finite_difference_gradients_per_component() {
    let mut cfg = small_cfg();
    cfg.batch_per_domain = 4;
    for mode in [GlobalMode::Quadratic, GlobalMode::Linear] {
        cfg.global_mode = mode;
        let (model, batches, draws) = toy_objective(&cfg, 6);
        for c in Component::ALL {
            let r = finite_difference_check(&cfg, &model, &batches, &draws, c, 1e-5, 1e-6).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{mode:?} {c:?}: {r:?}");
        }
    }
}

#[test]
fn finite_difference_gradients_for_ablation_variants() {
    let mut cfg = small_cfg();
    cfg.batch_per_domain = 4;
    cfg.ablation.global_variant = GlobalVariant::MeanEmbedding;
    cfg.ablation.local_variant = LocalVariant::MeanEmbedding;
    let (model, batches, draws) = toy_objective(&cfg, 7);
    for c in [Component::Global, Component::LocalPositive, Component::LocalNegative, Component::Total] {
        let r = finite_difference_check(&cfg, &model, &batches, &draws, c, 1e-5, 1e-6).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{c:?}: {r:?}");
    }
}

#[test]
fn detached_metric_input_blocks_local_gradient_into_extractor() {
    let mut cfg = small_cfg();
    cfg.detach_metric_input = true;
    let (model, batches, draws) = toy_objective(&cfg, 8);
    let obj = Objective::build(&cfg, &model, &batches, &draws).unwrap();
    let g = obj.gradient(&model, obj.parts.local).unwrap();
    assert!(g.block("extractor.weight.mu").unwrap().iter().all(|&v| v == 0.0));
    assert!(g.block("metric.0.weight").unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn evaluation_bookkeeping() {
    let cfg = small_cfg();
    let domains = blobs(3, 12, 4, 0.3, 9);
    let (out, metrics) = train_lodo(&cfg, &domains, 2, 3).unwrap();
    assert_eq!(metrics.n_samples, 12);
    assert!((0.0..=1.0).contains(&metrics.accuracy));
    assert!(metrics.mean_entropy >= 0.0 && metrics.mean_entropy <= 3f64.ln() + 1e-12);
    let again = evaluate_lodo(&cfg, &out.model, &domains, 2).unwrap();
    assert_eq!(again, metrics);
    assert!(evaluate_lodo(&cfg, &out.model, &domains, 3).is_err());

    let single = LabeledDomain::new(domains[0].x.select(ndarray::Axis(0), &[0, 3, 6]), vec![0, 0, 0], 7).unwrap();
    let m = evaluate_domain(&cfg, &out.model, &single).unwrap();
    assert!(m.per_class_accuracy[0].is_some());
    assert_eq!(m.per_class_accuracy[1], None);
    assert_eq!(m.per_class_accuracy[2], None);
    assert_eq!(m.majority_baseline, 1.0);
}

#[test]
fn trained_model_beats_majority_on_in_distribution_target() {
    let mut cfg = small_cfg();
    cfg.iterations = 30;
    for seed in 0..5 {
        cfg.seed = seed;
        let domains = blobs(3, 30, 4, 0.0, 100 + seed);
        let (_, m) = train_lodo(&cfg, &domains, 0, 3).unwrap();
        assert!(m.accuracy > m.majority_baseline, "seed {seed}: {m:?}");
    }
}

#[test]
fn ablation_flags_parse() {
    let mut a = Ablation::default();
    a.apply_flags("deterministic_mode, disable_local,mean_csa").unwrap();
    assert!(a.deterministic_mode && a.disable_local && !a.disable_global);
    assert_eq!(a.local_variant, LocalVariant::MeanEmbedding);
    assert!(a.apply_flags("bogus").is_err());
    assert_eq!(Ablation::erm().global_variant, GlobalVariant::Pmmd);
}

#[test]
fn identical_sources_start_with_small_global_loss() {
    let mut cfg = small_cfg();
    cfg.weights.t_passes = 10;
    cfg.batch_per_domain = 16;
    cfg.iterations = 1;
    cfg.init.pretrain_iterations = 100;
    cfg.init.backbone = vec![32];
    cfg.init.latent_dim = 16;
    cfg.init.metric_hidden = vec![16];
    cfg.init.metric_out = 8;
    for seed in 0..10 {
        cfg.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = blobs(1, 3 * 40, 8, 0.0, rng.random())[0].clone();
        let sources: Vec<LabeledDomain> = (0..3)
            .map(|k| {
                let idx: Vec<usize> = (k * 40..(k + 1) * 40).collect();
                LabeledDomain::new(
                    base.x.select(ndarray::Axis(0), &idx),
                    idx.iter().map(|&i| base.labels[i]).collect(),
                    k as u64,
                )
                .unwrap()
            })
            .collect();
        let model = initialize_model(&cfg, &sources, 3).unwrap();
        let out = fit(&cfg, &sources, model).unwrap();
        let g = out.log[0].components.global;
        assert!(g <= 0.05, "seed {seed}: L_global {g}");
    }
}
