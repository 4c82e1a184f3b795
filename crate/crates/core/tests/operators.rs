mod common;

use common::*;
use dio::io::write_ntf;
use dio::operators::{early_fuse, import_conv, log_matrix, make_laplacian, make_log, make_random_conv, make_sobel};
use dio::rng::Stream;
use dio::tensor::conv2d;
use dio::{build_operator, Error, Operator, OperatorSpec, Shape, Tensor};
use proptest::prelude::*;

#[test]
fn random_conv_golden_checksum() {
    let k = make_random_conv::<f64>(88, 64, 1).unwrap();
    assert_eq!((k.out_c(), k.in_c(), k.kh(), k.kw()), (64, 3, 1, 1));
    assert_eq!(checksum(&k), GOLDEN_RANDOM_88_64_1, "got {:#018x}", checksum(&k));
}

#[test]
fn random_conv_determinism_and_bound() {
    let a = make_random_conv::<f64>(88, 64, 1).unwrap();
    assert_eq!(a, make_random_conv(88, 64, 1).unwrap());
    assert_ne!(a.weights(), make_random_conv::<f64>(89, 64, 1).unwrap().weights());
    let b = 1.0 / 3f64.sqrt();
    assert!(a.weights().iter().all(|w| w.abs() < b));
    let k3 = make_random_conv::<f64>(88, 8, 3).unwrap();
    assert!(k3.weights().iter().all(|w| w.abs() < 1.0 / 27f64.sqrt()));
    assert!(make_random_conv::<f64>(88, 8, 2).is_err());
}

fn plane_image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, y, x| f(y, x)).unwrap()
}

#[test]
fn sobel_layout_and_ramp() {
    let k = make_sobel::<f64>();
    assert_eq!((k.out_c(), k.in_c(), k.kh(), k.kw()), (6, 3, 3, 3));
    let sx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let sy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    for i in 0..3 {
        for o in 0..6 {
            let want: &[f64] = if o / 2 != i {
                &[0.0; 9]
            } else if o % 2 == 0 {
                &sx
            } else {
                &sy
            };
            assert_eq!(k.slice(o, i), want, "o={o} i={i}");
        }
    }
    let ramp = plane_image(5, 5, |_, x| x as f64);
    let out = conv2d(&ramp, &k, 1, 0).unwrap();
    for c in 0..3 {
        assert!(out.plane(0, 2 * c).iter().all(|&v| v == 8.0));
        assert!(out.plane(0, 2 * c + 1).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn laplacian_impulse_and_oracle() {
    let k = make_laplacian::<f64>();
    assert_eq!((k.out_c(), k.in_c()), (3, 3));
    let imp = plane_image(5, 5, |y, x| if (y, x) == (2, 2) { 1.0 } else { 0.0 });
    let out = conv2d(&imp, &k, 1, 1).unwrap();
    let stamp = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    for c in 0..3 {
        for y in 0..5 {
            for x in 0..5 {
                let want = if (1..4).contains(&y) && (1..4).contains(&x) { stamp[(y - 1) * 3 + x - 1] } else { 0.0 };
                assert_eq!(out.at(0, c, y, x), want);
            }
        }
    }
    let mut rng = Stream::new(2);
    let r = random_tensor(&mut rng, Shape::new(1, 3, 6, 6));
    assert!(max_abs_diff(&conv2d(&r, &k, 1, 1).unwrap(), &naive_conv(&r, &k, 1, 1)) < 1e-9);
}

#[test]
fn log_weights() {
    for (sigma, k) in [(0.5, 3), (1.0, 5), (1.4, 7), (2.0, 9)] {
        let m = log_matrix(sigma, k).unwrap();
        assert!(m.iter().sum::<f64>().abs() < 1e-12);
    }
    let (sigma, k) = (1.0f64, 5usize);
    let raw: Vec<f64> = (0..k * k)
        .map(|i| {
            let (y, x) = ((i / k) as f64 - 2.0, (i % k) as f64 - 2.0);
            let r2 = x * x + y * y;
            (r2 - 2.0 * sigma * sigma) / sigma.powi(4) * (-r2 / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let bank = make_log::<f64>(sigma, k).unwrap();
    assert!((bank.weight(0, 0, 2, 2) - (raw[12] - mean)).abs() < 1e-12);
    assert_eq!(bank.weight(0, 1, 2, 2), 0.0);
    assert!(matches!(make_log::<f64>(1.0, 4), Err(Error::Config(_))));
    assert!(matches!(make_log::<f64>(0.0, 5), Err(Error::Config(_))));
    assert!(matches!(make_log::<f64>(-1.0, 5), Err(Error::Config(_))));
}

fn op(s: &str) -> Operator {
    build_operator(&s.parse().unwrap()).unwrap()
}

#[test]
fn high_pass_operators_zero_constants() {
    for v in [0.0, 0.3, 0.73, 1.0] {
        let c = Tensor::full(Shape::new(2, 3, 9, 7), v).unwrap();
        for s in ["sobel", "laplacian", "log:sigma=1.0,k=5", "cascade(random:seed=1,out=8,k=3|sobel)"] {
            assert!(op(s).apply(&c).unwrap().data().iter().all(|&x| x == 0.0), "{s} on {v}");
        }
        assert!(op("avgpool:k=2,stride=2").apply(&c).unwrap().data().iter().all(|&x| x == v));
    }
}

#[test]
fn build_examples() {
    let mut rng = Stream::new(4);
    let x = random_image(&mut rng, 2, 10, 12);
    assert_eq!(op("cascade(sobel)").apply(&x).unwrap(), op("sobel").apply(&x).unwrap());

    let casc = op("cascade(random:seed=88,out=64,k=1|sobel)");
    assert_eq!(casc.out_channels(3).unwrap(), 128);
    assert_eq!(casc.apply(&x).unwrap().shape(), Shape::new(2, 128, 10, 12));

    let img = random_image(&mut rng, 1, 64, 64);
    assert_eq!(op("avgpool:k=2,stride=2").apply(&img).unwrap().shape(), Shape::new(1, 3, 32, 32));

    let random = op("random:seed=88,out=64,k=1");
    assert_eq!(random.apply(&x).unwrap(), conv2d(&x, &make_random_conv(88, 64, 1).unwrap(), 1, 0).unwrap());

    let err = build_operator::<f64>(&"cascade(sobel|random:seed=1,out=4,k=1)".parse().unwrap()).unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("stage 1")), "{err}");
}

#[test]
fn spec_validation() {
    for bad in ["cascade()", "random:seed=1,out=0,k=1", "random:seed=1,out=4,k=2", "log:sigma=1.0,k=4", "avgpool:k=0,stride=1", "blur", "sobel:k=3", "cascade(sobel"] {
        assert!(bad.parse::<OperatorSpec>().is_err(), "{bad}");
    }
    let mut deep = "sobel".to_string();
    for _ in 0..8 {
        deep = format!("cascade({deep})");
    }
    assert!(deep.parse::<OperatorSpec>().is_ok());
    assert!(format!("cascade({deep})").parse::<OperatorSpec>().is_err());
}

#[test]
fn import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let k = make_random_conv::<f64>(5, 8, 3).unwrap().cast::<f32>().cast::<f64>();
    let path = dir.path().join("k.ntf");
    write_ntf(&k.to_tensor(), &path).unwrap();
    let back = import_conv::<f64>(&path).unwrap();
    assert_eq!(back.weights(), k.weights());
    assert_eq!((back.out_c(), back.in_c(), back.kh(), back.kw()), (8, 3, 3, 3));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = import_conv::<f64>(&path).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert!(import_conv::<f64>(&dir.path().join("missing.ntf")).is_err());
}

#[test]
fn imported_sobel_behaves_like_sobel() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sobel.ntf");
    write_ntf(&make_sobel::<f64>().to_tensor(), &path).unwrap();
    let imported = import_conv::<f64>(&path).unwrap();
    assert_eq!(imported.weights(), make_sobel::<f64>().weights());

    let mut rng = Stream::new(9);
    let x = random_image(&mut rng, 2, 9, 9);
    assert_eq!(conv2d(&x, &imported, 1, 1).unwrap(), conv2d(&x, &make_sobel(), 1, 1).unwrap());
    let via_op = op(&format!("import:path={}", path.display())).apply(&x).unwrap();
    assert!(max_abs_diff(&via_op, &op("sobel").apply(&x).unwrap()) < 1e-12);
}

#[test]
fn early_fusion() {
    let mut rng = Stream::new(6);
    let x = random_image(&mut rng, 1, 8, 8);
    let (s, l) = (op("sobel"), op("laplacian"));
    assert_eq!(early_fuse(std::slice::from_ref(&s), &x).unwrap(), s.apply(&x).unwrap());
    let sl = early_fuse(&[s.clone(), l.clone()], &x).unwrap();
    let ls = early_fuse(&[l, s], &x).unwrap();
    assert_eq!(sl.shape(), Shape::new(1, 9, 8, 8));
    for c in 0..9 {
        let moved = if c < 6 { c + 3 } else { c - 6 };
        assert_eq!(sl.plane(0, c), ls.plane(0, moved));
    }
    let err = early_fuse(&[op("sobel"), op("avgpool:k=2,stride=2")], &x).unwrap_err();
    assert!(matches!(&err, Error::Shape(m) if m.contains("operator 1")), "{err}");
}

#[test]
fn apply_leaves_operator_untouched() {
    let o = op("cascade(random:seed=88,out=64,k=1|sobel)");
    let before = o.to_bytes();
    let mut rng = Stream::new(1);
    for _ in 0..5 {
        o.apply(&random_image(&mut rng, 2, 8, 8)).unwrap();
    }
    assert_eq!(o.to_bytes(), before);
}

const LEAVES: [&str; 6] = [
    "sobel",
    "laplacian",
    "log:sigma=0.8,k=3",
    "avgpool:k=2,stride=1",
    "random:seed=3,out=3,k=1",
    "random:seed=4,out=3,k=3",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cascade_is_sequential_and_associative(a in 0usize..6, b in 0usize..6, c in 0usize..4, seed in any::<u64>()) {
        // Random banks take RGB, so they may only lead a chain.
        let c = [0usize, 1, 2, 3][c];
        let (f, g, h) = (LEAVES[a], LEAVES[b.min(3)], LEAVES[c]);
        let mut rng = Stream::new(seed);
        let x = random_image(&mut rng, 1, 9, 9);
        let fx = op(f).apply(&x).unwrap();
        let seq = op(g).apply_any(&fx).unwrap();
        prop_assert_eq!(op(&format!("cascade({f}|{g})")).apply(&x).unwrap(), seq.clone());
        let left = op(&format!("cascade(cascade({f}|{g})|{h})")).apply(&x).unwrap();
        let right = op(&format!("cascade({f}|cascade({g}|{h}))")).apply(&x).unwrap();
        prop_assert_eq!(&left, &right);
        prop_assert_eq!(&left, &op(h).apply_any(&seq).unwrap());
        prop_assert_eq!(op(&format!("cascade({f}|{g}|{h})")).out_channels(3).unwrap(), left.shape().c);
    }

    #[test]
    fn conv_stages_preserve_spatial_dims(a in 0usize..6, h in 5usize..12, w in 5usize..12, seed in any::<u64>()) {
        prop_assume!(!LEAVES[a].starts_with("avgpool"));
        let mut rng = Stream::new(seed);
        let y = op(LEAVES[a]).apply(&random_image(&mut rng, 1, h, w)).unwrap();
        prop_assert_eq!((y.shape().h, y.shape().w), (h, w));
    }

    #[test]
    fn spec_strings_round_trip(a in 0usize..6, b in 0usize..6, nest in any::<bool>()) {
        let s = if nest { format!("cascade({}|cascade({}))", LEAVES[a], LEAVES[b]) } else { LEAVES[a].to_string() };
        let spec: OperatorSpec = s.parse().unwrap();
        prop_assert_eq!(spec.to_string(), s.clone());
        prop_assert_eq!(spec.to_string().parse::<OperatorSpec>().unwrap(), spec);
    }
}
