use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::ExperimentConfig;
use crate::gradcheck::{central_difference, max_rel_error};
use crate::nets::ModelConfig;
use crate::synthgen::{generate_sine_batch, PartLabel, SineBatchSpec};

#[test]
fn curriculum_schedule_matches_reference_examples() {
    let t = TrainConfig::reference(16);
    assert_eq!(t.curriculum_k(0), 2);
    assert_eq!(t.curriculum_k(2999), 2);
    assert_eq!(t.curriculum_k(3000), 3);
    assert_eq!(t.curriculum_k(42_000), 16);
    assert_eq!(t.curriculum_k(1_000_000), 16);
}

#[test]
fn learning_rate_schedule_matches_reference_examples() {
    let t = TrainConfig::reference(16);
    assert_eq!(t.learning_rate(0, 1.0), 1e-4);
    assert_eq!(t.learning_rate(19_999, 1.0), 1e-4);
    assert!((t.learning_rate(40_000, 1.0) - 2.5e-5).abs() < 1e-18);
    assert_eq!(t.learning_rate(500_000, 1.0), 1e-6);
    assert!((t.learning_rate(0, 0.5) - 5e-5).abs() < 1e-18);
}

#[test]
fn train_config_validation() {
    TrainConfig::reference(16).validate().unwrap();
    let mut t = TrainConfig::reference(16);
    t.curriculum_start_k = 17;
    assert!(t.validate().is_err());
    let mut t = TrainConfig::reference(16);
    t.adam_beta2 = 1.0;
    assert!(t.validate().is_err());
    let mut t = TrainConfig::reference(16);
    t.metrics_every = 0;
    assert!(t.validate().is_err());
}

fn tiny_setup(
    k: usize,
    seed: u64,
) -> (
    CompVae,
    Tensor,
    LabelTensors,
    StepNoise,
    Vec<Vec<PartLabel>>,
) {
    let model = CompVae::new(ModelConfig::sine_tiny(100, 5), seed).unwrap();
    let spec = SineBatchSpec {
        batch_size: 2,
        freq_range: (1, 5),
        parts_range: (1, 4),
        timesteps: 100,
        seed,
        ..SineBatchSpec::default()
    };
    let batch = generate_sine_batch(&spec, k).unwrap();
    let x = model.x_tensor(&batch.data, 2).unwrap();
    let labels = model.label_tensors(&batch.labels).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let noise = StepNoise::sample(&mut rng, &model, 2, k).unwrap();
    (model, x, labels, noise, batch.labels)
}

#[test]
fn breakdown_total_is_sum_and_l_w_nonnegative() {
    let (model, x, labels, noise, _) = tiny_setup(3, 1);
    let b = elbo_terms(&model, &x, &labels, &noise)
        .unwrap()
        .breakdown()
        .unwrap();
    assert_eq!(b.total, b.l_w + b.l_z + b.l_x);
    assert!(b.l_w >= 0.0);
    assert!(b.is_finite());
}

#[test]
fn l_w_vanishes_when_posterior_equals_prior() {
    let (model, x, labels, noise, _) = tiny_setup(3, 2);
    let dw = model.config().dim_w;
    let ps = model.params();
    let dev = &Device::Cpu;
    let (mu0, nu0) = (0.3, -0.4);
    let out_w = ps.get("q_w.out.weight").unwrap();
    out_w.set(&out_w.as_tensor().zeros_like().unwrap()).unwrap();
    let mut bias = vec![mu0; dw];
    bias.extend(vec![nu0; dw]);
    bias.extend(vec![-1e4; dw]);
    ps.get("q_w.out.bias")
        .unwrap()
        .set(&Tensor::new(bias.as_slice(), dev).unwrap())
        .unwrap();
    let embed = ps.get("p_w.embed.weight").unwrap();
    let rows = embed.dims()[0];
    let mut row = vec![mu0; dw];
    row.extend(vec![nu0; dw]);
    let table: Vec<f64> = (0..rows).flat_map(|_| row.clone()).collect();
    embed
        .set(&Tensor::from_vec(table, (rows, 2 * dw), dev).unwrap())
        .unwrap();
    let b = elbo_terms(&model, &x, &labels, &noise)
        .unwrap()
        .breakdown()
        .unwrap();
    assert!(b.l_w.abs() < 1e-12, "L_w = {}", b.l_w);
}

#[test]
fn elbo_is_invariant_to_part_order() {
    let (model, x, labels, noise, _) = tiny_setup(4, 3);
    let base = elbo_terms(&model, &x, &labels, &noise)
        .unwrap()
        .breakdown()
        .unwrap();
    let perm = [3u32, 1, 0, 2];
    let p = elbo_terms(
        &model,
        &x,
        &labels.permute_parts(&perm).unwrap(),
        &noise.permute_parts(&perm).unwrap(),
    )
    .unwrap()
    .breakdown()
    .unwrap();
    for (a, b) in [(base.l_w, p.l_w), (base.l_z, p.l_z), (base.l_x, p.l_x)] {
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn elbo_gradient_matches_finite_differences_on_sampled_parameters() {
    let (model, x, labels, noise, _) = tiny_setup(3, 4);
    let f = || {
        elbo_terms(&model, &x, &labels, &noise)
            .unwrap()
            .total
            .to_scalar::<f64>()
            .unwrap()
    };
    let grads = elbo_terms(&model, &x, &labels, &noise)
        .unwrap()
        .total
        .backward()
        .unwrap();
    for path in [
        "p_w.embed.weight",
        "p_z.out.bias",
        "p_x.up1.weight",
        "pre.conv2.weight",
        "q_w.graph1.f_mix.weight",
    ] {
        let var = model.params().get(path).unwrap();
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let numeric = central_difference(var, 1e-5, f).unwrap();
        let err = max_rel_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "{path}: {err}");
    }
}

#[test]
fn step_noise_shapes() {
    let model = CompVae::new(ModelConfig::gradient_tiny(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = StepNoise::sample(&mut rng, &model, 3, 2).unwrap();
    assert_eq!(n.z.dims(), &[3, 4]);
    assert_eq!(n.node.dims(), &[3, 2, 8]);
    assert_eq!(n.w.dims(), &[3, 2, 16]);
}

#[test]
fn trainer_logs_rows_and_schedules() {
    let mut cfg = ExperimentConfig::sine_tiny();
    cfg.train.max_iterations = 40;
    cfg.train.metrics_every = 10;
    cfg.train.curriculum_step_every = 10;
    let mut tr = Trainer::new(cfg, None).unwrap();
    let summary = tr.run().unwrap();
    assert_eq!(summary.iterations, 40);
    let rows = tr.rows();
    assert_eq!(
        rows.iter().map(|r| r.iteration).collect::<Vec<_>>(),
        vec![10, 20, 30, 40]
    );
    assert_eq!(
        rows.iter().map(|r| r.k_max).collect::<Vec<_>>(),
        vec![2, 3, 4, 4]
    );
    assert!(rows.iter().all(|r| r.l_w >= 0.0 && r.elbo.is_finite()));
    assert!(rows
        .windows(2)
        .all(|w| w[1].learning_rate <= w[0].learning_rate));
}

#[test]
fn divergence_rolls_back_and_lowers_the_learning_rate() {
    let mut cfg = ExperimentConfig::sine_tiny();
    cfg.train.checkpoint_every = 5;
    cfg.train.max_restores = 1;
    let mut tr = Trainer::new(cfg, None).unwrap();
    for _ in 0..5 {
        tr.step().unwrap().unwrap();
    }
    let good = tr.model().params().snapshot().unwrap();
    let lr = tr.learning_rate();
    let var = tr.model().params().get("p_x.out.bias").unwrap();
    var.set(&(var.as_tensor() * f64::NAN).unwrap()).unwrap();
    assert!(tr.step().unwrap().is_none());
    assert_eq!(tr.iteration(), 5);
    assert_eq!(tr.learning_rate(), lr * 0.5);
    let restored = tr.model().params().snapshot().unwrap();
    for (k, t) in &good {
        let a: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = restored[k].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b, "{k}");
    }
    assert!(tr.step().unwrap().is_some());
    // a second consecutive failure exceeds max_restores = 1
    let var = tr.model().params().get("p_x.out.bias").unwrap();
    var.set(&(var.as_tensor() * f64::NAN).unwrap()).unwrap();
    assert!(matches!(tr.step(), Err(Error::Diverged(1))));
}

#[test]
fn convergence_rule_stops_a_flat_run() {
    let mut cfg = ExperimentConfig::sine_tiny();
    cfg.train.adam_alpha = 1e-12;
    cfg.train.alpha_min = 1e-12;
    cfg.train.convergence_window = 10;
    cfg.train.convergence_tol_bits = 1e6;
    cfg.train.max_iterations = 1000;
    let mut tr = Trainer::new(cfg, None).unwrap();
    let s = tr.run().unwrap();
    assert_eq!(s.stop, StopReason::Converged);
    assert_eq!(s.iterations, 20);
}
