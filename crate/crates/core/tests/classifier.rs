mod common;

use common::*;
use dio::classifier::{
    adam_step, backward, cross_entropy, forward, late_fuse_predict, predict, softmax2, train_images, Detector, FusionMode,
    ImageSet, ModelParams, OptimizerState, TrainConfig,
};
use dio::datagen::{make_benchmark, source_images, Injector, Texture};
use dio::rng::Stream;
use dio::{Error, Extractor, Kernel, OperatorSpec, Provenance, Shape, Tensor};
use proptest::prelude::*;

#[test]
fn gradients_match_finite_differences_c3() {
    let worst = gradient_check(3).unwrap();
    assert!(worst < 1e-4);
}

#[test]
fn gradients_match_finite_differences_c6() {
    let worst = gradient_check(6).unwrap();
    assert!(worst < 1e-4);
}

#[test]
fn gradients_match_finite_differences_c64() {
    let worst = gradient_check(64).unwrap();
    assert!(worst < 1e-4);
}

/// Independent forward pass built from the naive convolution.
fn oracle_logits(p: &ModelParams, x: &Tensor) -> Vec<[f64; 2]> {
    let relu_bias = |t: Tensor, b: &[f64]| {
        let s = t.shape();
        Tensor::from_fn(s, |n, c, y, xx| (t.at(n, c, y, xx) + b[c]).max(0.0)).unwrap()
    };
    let k1 = Kernel::new(16, p.c_in(), 3, 3, p.conv1_w.clone(), Provenance::Random(0)).unwrap();
    let k2 = Kernel::new(32, 16, 3, 3, p.conv2_w.clone(), Provenance::Random(0)).unwrap();
    let a1 = relu_bias(naive_conv(x, &k1, 2, 1), &p.conv1_b);
    let a2 = relu_bias(naive_conv(&a1, &k2, 2, 1), &p.conv2_b);
    let s = a2.shape();
    (0..s.n)
        .map(|n| {
            let mut l = [p.fc_b[0], p.fc_b[1]];
            for j in 0..32 {
                let g = a2.plane(n, j).iter().sum::<f64>() / s.plane() as f64;
                l[0] += g * p.fc_w[j * 2];
                l[1] += g * p.fc_w[j * 2 + 1];
            }
            l
        })
        .collect()
}

#[test]
fn forward_matches_oracle() {
    let mut rng = Stream::new(21);
    for c in [3, 5] {
        let mut p = ModelParams::init(c, 9);
        p.conv1_b.iter_mut().chain(&mut p.conv2_b).for_each(|b| *b = rng.range(-0.2, 0.2));
        for (h, w) in [(8, 8), (9, 7)] {
            let x = random_tensor(&mut rng, Shape::new(2, c, h, w));
            let (got, _) = forward(&p, &x).unwrap();
            for (a, b) in got.iter().zip(oracle_logits(&p, &x)) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn forward_examples() {
    let mut rng = Stream::new(1);
    let x = random_tensor(&mut rng, Shape::new(3, 4, 8, 8));
    let zero = ModelParams::zeros(4);
    assert!(forward(&zero, &x).unwrap().0.iter().all(|l| *l == [0.0, 0.0]));

    let p = ModelParams::init(4, 1);
    let mut shifted = p.clone();
    shifted.fc_b.iter_mut().for_each(|b| *b += 0.75);
    let (a, _) = forward(&p, &x).unwrap();
    let (b, _) = forward(&shifted, &x).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((v[0] - u[0] - 0.75).abs() < 1e-12 && (v[1] - u[1] - 0.75).abs() < 1e-12);
    }
    assert!(matches!(forward(&p, &random_tensor(&mut rng, Shape::new(1, 3, 8, 8))), Err(Error::Config(_))));
}

#[test]
fn backward_examples() {
    let mut rng = Stream::new(2);
    let x = random_tensor(&mut rng, Shape::new(3, 3, 8, 8));
    let p = ModelParams::init(3, 4);
    let (_, cache) = forward(&p, &x).unwrap();
    let zero = backward(&p, &cache, &[[0.0; 2]; 3]);
    assert!(zero.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));

    let dl = [[0.1, -0.2], [0.3, 0.05], [-0.4, 0.6]];
    let g = backward(&p, &cache, &dl);
    assert!((g.fc_b[0] - 0.0).abs() < 1e-15 && (g.fc_b[1] - 0.45).abs() < 1e-15);

    // A dead first layer passes no gradient to its weights.
    let mut dead = p.clone();
    dead.conv1_b.iter_mut().for_each(|b| *b = -100.0);
    let (_, cache) = forward(&dead, &x).unwrap();
    let g = backward(&dead, &cache, &dl);
    assert!(g.conv1_w.iter().chain(&g.conv1_b).chain(&g.conv2_w).all(|&v| v == 0.0));
}

#[test]
fn adam_with_zero_lr_only_moves_moments() {
    let mut p = ModelParams::init(3, 1);
    let before = p.clone();
    let mut g = ModelParams::zeros(3);
    g.fc_w.iter_mut().for_each(|v| *v = 0.5);
    let mut st = OptimizerState::new(&p, 0.0);
    adam_step(&mut st, &mut p, &g);
    adam_step(&mut st, &mut p, &g);
    assert_eq!(p, before);
    assert_eq!(st.t, 2);
    assert!(st.m.fc_w.iter().all(|&m| m > 0.0) && st.v.fc_w.iter().all(|&v| v > 0.0));
}

fn toy_images() -> ImageSet {
    let mut s = make_benchmark(0)[0].clone();
    s.size = 16;
    s.count = 24;
    s.texture = Texture::SmoothNoise;
    s.noise = 0.01;
    s.fake_tint = [0.3, -0.3, 0.3];
    s.injector = Injector::CheckerboardUpsample;
    s.strength = 1.0;
    source_images(&s).unwrap()
}

fn toy_config(op: &str) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        batch_size: 8,
        base_lr: 1e-2,
        decay_interval: 10,
        seed: 3,
        operators: vec![op.parse().unwrap()],
        ..TrainConfig::default()
    }
}

#[test]
fn separable_toy_is_learned() {
    let images = toy_images();
    let cfg = toy_config("none");
    let ex = Extractor::single(&cfg.operators[0]).unwrap();
    let (_, log) = train_images(&cfg, &ex, &images).unwrap();
    assert!((log.first_batch_loss - std::f64::consts::LN_2).abs() < 0.15, "{}", log.first_batch_loss);
    assert!(log.epochs.iter().any(|e| e.train_acc == 1.0), "{:?}", log.epochs.last());
}

#[test]
fn training_is_deterministic_and_training_free() {
    let images = toy_images();
    let cfg = TrainConfig { epochs: 2, ..toy_config("cascade(random:seed=88,out=64,k=1|sobel)") };
    let ex = Extractor::single(&cfg.operators[0]).unwrap();
    let bytes = ex.to_bytes();
    let (a, _) = train_images(&cfg, &ex, &images).unwrap();
    assert_eq!(ex.to_bytes(), bytes);
    let (b, _) = train_images(&cfg, &ex, &images).unwrap();
    assert_eq!(a, b);

    let late = TrainConfig {
        operators: vec![OperatorSpec::Sobel, OperatorSpec::Laplacian],
        fusion: FusionMode::Late,
        ..cfg
    };
    let enc = |d: &Detector| d.to_checkpoint(&late).unwrap().encode().unwrap();
    let (d1, _) = Detector::train(&late, &images).unwrap();
    let (d2, _) = Detector::train(&late, &images).unwrap();
    assert_eq!(enc(&d1), enc(&d2));
}

#[test]
fn single_class_data_is_rejected() {
    let all = toy_images();
    let mut only_real = ImageSet::default();
    let (h, w) = (all.h, all.w);
    for i in (0..all.len()).filter(|&i| all.labels[i] == 0) {
        let img = all.batch(&[i]);
        assert_eq!((img.shape().h, img.shape().w), (h, w));
        only_real.push(&img, 0).unwrap();
    }
    let cfg = toy_config("sobel");
    let ex = Extractor::single(&cfg.operators[0]).unwrap();
    assert!(matches!(train_images(&cfg, &ex, &only_real), Err(Error::Config(_))));
}

#[test]
fn predictions_and_late_fusion() {
    let mut rng = Stream::new(12);
    let x = random_image(&mut rng, 4, 12, 12);
    let ex: Extractor = Extractor::single(&OperatorSpec::Sobel).unwrap();
    let zero = ModelParams::zeros(6);
    assert!(predict(&zero, &ex, &x).unwrap().iter().all(|&p| p == 0.5));

    let a = (ModelParams::init(6, 1), ex.clone());
    let b = (ModelParams::init(3, 2), Extractor::single(&OperatorSpec::Laplacian).unwrap());
    let pa = predict(&a.0, &a.1, &x).unwrap();
    assert!(pa.iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(late_fuse_predict(std::slice::from_ref(&a), &x).unwrap(), pa);
    let ab = late_fuse_predict(&[a.clone(), b.clone()], &x).unwrap();
    let ba = late_fuse_predict(&[b.clone(), a.clone()], &x).unwrap();
    let pb = predict(&b.0, &b.1, &x).unwrap();
    for i in 0..4 {
        assert!((ab[i] - ba[i]).abs() < 1e-15);
        assert!((ab[i] - (pa[i] + pb[i]) / 2.0).abs() < 1e-15);
    }
    assert!(late_fuse_predict(&[], &x).is_err());
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(a in -800.0f64..800.0, b in -800.0f64..800.0) {
        let p = softmax2([a, b]);
        prop_assert!(p[0] >= 0.0 && p[1] >= 0.0);
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probability_grows_with_logit_gap(a in -20.0f64..20.0, d in 0.01f64..5.0) {
        prop_assert!(softmax2([0.0, a + d])[1] >= softmax2([0.0, a])[1]);
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero(l0 in -50.0f64..50.0, l1 in -50.0f64..50.0, y in 0u8..2) {
        let (loss, d) = cross_entropy(&[[l0, l1]], &[y]);
        prop_assert!(loss.is_finite() && loss >= 0.0);
        prop_assert!((d[0][0] + d[0][1]).abs() < 1e-12);
    }
}
