use gaei_core::data::generate_synthetic_vessels;
use gaei_core::data::SynthParams;
use gaei_core::elastic::{ElasticConfig, Field2D};
use gaei_core::network::{
    build_network, loss_total_with_config, Checkpoint, GaeiUnetConfig, LossWeights, LrSchedule, TrainConfig, Trainer,
    Variant,
};
use gaei_core::tensor::{Mode, RngStream, Tensor4};
use gaei_core::Error;

fn small_config(depth: usize, base: usize) -> GaeiUnetConfig {
    GaeiUnetConfig {
        depth,
        base_channels: base,
        dropblock_size: 3,
        ..GaeiUnetConfig::default()
    }
}

fn random_image(dims: [usize; 4], rng: &mut RngStream) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.uniform())
}

fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

fn unit(cin: usize, cout: usize) -> usize {
    conv(cin, cout, 3) + 2 * cout
}

fn res(cin: usize, cout: usize) -> usize {
    unit(cin, cout) + unit(cout, cout) + if cin != cout { conv(cin, cout, 1) } else { 0 }
}

#[test]
fn parameter_count_matches_hand_tally() {
    let net = build_network(&small_config(2, 16), &mut RngStream::new(0, 0)).unwrap();
    let tally = [
        res(3, 16),
        unit(16, 32),
        res(32, 32),
        unit(32, 64),
        4 * 64 * 64,
        conv(64, 32, 2) + res(64, 32),
        conv(32, 16, 2) + res(32, 16),
        conv(16, 2, 1),
    ];
    assert_eq!(tally, [2896, 4704, 18624, 18624, 16384, 38144, 9600, 34]);
    assert_eq!(net.parameter_count(), tally.iter().sum::<usize>());
    assert_eq!(net.parameter_count(), 109_010);
}

#[test]
fn output_is_a_two_class_distribution() {
    let mut rng = RngStream::new(1, 0);
    let mut net = build_network(&small_config(2, 4), &mut rng).unwrap();
    net.initialize_running_stats();
    let x = random_image([1, 3, 64, 64], &mut rng);
    let p = net.forward(&x, Mode::Eval, &mut rng).unwrap();
    assert_eq!(p.dims(), [1, 2, 64, 64]);
    for (a, b) in p.plane_of(0, 0).iter().zip(p.plane_of(0, 1)) {
        assert!((a + b - 1.0).abs() < 1e-12);
        assert!((0.3..=0.7).contains(b));
    }
}

#[test]
fn rejects_inputs_not_divisible_by_depth() {
    let mut rng = RngStream::new(2, 0);
    let mut net = build_network(&small_config(3, 4), &mut rng).unwrap();
    let x = random_image([1, 3, 60, 64], &mut rng);
    assert!(net.forward(&x, Mode::Train, &mut rng).is_err());
}

#[test]
fn eval_without_running_statistics_fails() {
    let mut rng = RngStream::new(3, 0);
    let mut net = build_network(&small_config(1, 4), &mut rng).unwrap();
    let x = random_image([1, 3, 8, 8], &mut rng);
    assert!(matches!(net.forward(&x, Mode::Eval, &mut rng), Err(Error::Config(_))));
}

#[test]
fn ablation_flags_select_components() {
    let mut plain = small_config(2, 4);
    Variant::Unet.apply(&mut plain);
    let mut full = small_config(2, 4);
    Variant::Gaei.apply(&mut full);
    let a = build_network(&plain, &mut RngStream::new(0, 0)).unwrap();
    let b = build_network(&full, &mut RngStream::new(0, 0)).unwrap();
    assert!(!a.has_attention() && b.has_attention());
    let bottom = 4 << 2;
    assert_eq!(b.parameter_count() - a.parameter_count(), 4 * bottom * bottom);
    assert!(a.params().iter().all(|p| !p.name.starts_with("agca")));
}

#[test]
fn without_dropblock_train_matches_eval_after_calibration() {
    let mut cfg = small_config(2, 4);
    cfg.use_dropblock = false;
    let mut rng = RngStream::new(4, 0);
    let mut net = build_network(&cfg, &mut rng).unwrap();
    let x = random_image([2, 3, 16, 16], &mut rng);
    let train = net.calibrate_batchnorm(&x, &mut rng).unwrap();
    let eval = net.forward(&x, Mode::Eval, &mut rng).unwrap();
    for (a, b) in train.data().iter().zip(eval.data()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

fn toy_samples(n: usize, size: usize) -> Vec<gaei_core::data::Sample> {
    let params = SynthParams {
        branch_depth: 2,
        size_divisor: 4,
        ..SynthParams::default()
    };
    generate_synthetic_vessels(n, size, size, 5, &params).unwrap()
}

fn trainer(variant: Variant, lr: f64) -> Trainer {
    let mut net = small_config(2, 4);
    variant.apply(&mut net);
    let train = TrainConfig {
        epochs: 1,
        batch_size: 2,
        lr_schedule: LrSchedule::constant(lr),
        augment: None,
        seed: 6,
        ..TrainConfig::default()
    };
    Trainer::new(&net, train, variant.loss_weights(), ElasticConfig::default()).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let samples = toy_samples(4, 16);
    let mut t = trainer(Variant::Gaei, 0.0);
    let before: Vec<Tensor4> = t.network.params().iter().map(|p| p.value.clone()).collect();
    t.train_epoch(&samples).unwrap();
    for (p, b) in t.network.params().iter().zip(&before) {
        assert_eq!(&p.value, b, "{}", p.name);
    }
}

#[test]
fn overfits_a_single_batch() {
    let samples = toy_samples(2, 16);
    let mut t = trainer(Variant::Unet, 1e-2);
    let refs: Vec<_> = samples.iter().collect();
    let (images, targets) = gaei_core::network::batch_of(&refs).unwrap();
    let mut rng = RngStream::new(0, 0);
    let first = t.train_step(&images, &targets, 1e-2, &mut rng, 1, 0).unwrap().total;
    let mut last = first;
    for step in 1..200 {
        last = t.train_step(&images, &targets, 1e-2, &mut rng, 1, step).unwrap().total;
    }
    assert!(last < 0.1 * first, "{first} -> {last}");
}

#[test]
fn default_schedule_drops_after_epoch_100() {
    let s = LrSchedule::default();
    assert_eq!(s.lr_at(1), 1e-3);
    assert_eq!(s.lr_at(100), 1e-3);
    assert_eq!(s.lr_at(101), 1e-4);
    assert_eq!(s.lr_at(150), 1e-4);
}

#[test]
fn prediction_is_deterministic_and_thresholded() {
    let samples = toy_samples(4, 16);
    let mut t = trainer(Variant::Gaei, 1e-3);
    t.train_epoch(&samples).unwrap();
    let (p1, m1) = t.network.predict(&samples[0].image).unwrap();
    let (p2, m2) = t.network.predict(&samples[0].image).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(m1, m2);
    assert_eq!(m1, p1.map(|v| (v > 0.5) as u8 as f64));
}

#[test]
fn zero_elastic_weight_scales_cross_entropy() {
    let mut rng = RngStream::new(7, 0);
    let p1 = Field2D::from_fn(8, 8, |_, _| rng.uniform_range(0.05, 0.95));
    let pred = Tensor4::from_fn([1, 2, 8, 8], |_, c, y, x| if c == 1 { p1.get(y, x) } else { 1.0 - p1.get(y, x) });
    let target = Field2D::from_fn(8, 8, |_, _| rng.bernoulli(0.3) as u8 as f64);
    let weights = LossWeights { beta1: 0.0, beta2: 1.5 };
    let out = loss_total_with_config(&pred, &[target.clone()], &weights, &ElasticConfig::default()).unwrap();
    let ce = p1
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln()))
        .sum::<f64>()
        / 64.0;
    assert!((out.total - 1.5 * ce).abs() < 1e-12);
    assert_eq!(out.elastic, 0.0);
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let samples = toy_samples(4, 16);
    let mut t = trainer(Variant::Gaei, 1e-3);
    t.train_epoch(&samples).unwrap();
    let path = dir.path().join("ckpt.json");
    t.checkpoint().save(&path).unwrap();
    let ckpt = Checkpoint::load(&path).unwrap();
    let mut restored = ckpt.load_network(Some(t.network.config())).unwrap();
    assert_eq!(restored.predict(&samples[1].image).unwrap(), t.network.predict(&samples[1].image).unwrap());
    let resumed = Trainer::from_checkpoint(&ckpt).unwrap();
    assert_eq!(resumed.epoch, 1);
    assert_eq!(resumed.adam.state, t.adam.state);

    let mut other = t.network.config().clone();
    other.base_channels = 8;
    assert!(matches!(ckpt.load_network(Some(&other)), Err(Error::Checkpoint(_))));
}
