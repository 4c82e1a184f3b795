use std::collections::BTreeSet;

use dio::datagen::{
    benchmark_images, gen_content, gen_pair, gen_source, inject_artifact, make_benchmark, write_benchmark, Injector, SourceSpec,
    Texture, TEST_MANIFEST, TRAIN_MANIFEST,
};
use dio::io::pnm::decode_pnm;
use dio::io::read_manifest;
use dio::metrics::load_sources;
use dio::classifier::ImageSet;
use dio::{build_operator, Shape, Tensor};

fn small(id: &str, count: usize) -> SourceSpec {
    let mut s = make_benchmark(5)[1].clone();
    s.id = id.into();
    s.size = 16;
    s.count = count;
    s
}

fn channel_means(t: &Tensor) -> [f64; 3] {
    [0, 1, 2].map(|c| t.plane(0, c).iter().sum::<f64>() / t.shape().plane() as f64)
}

#[test]
fn content_is_deterministic_and_clamped() {
    for texture in [Texture::Blobs, Texture::Stripes, Texture::SmoothNoise] {
        let mut s = small("A", 1);
        s.texture = texture;
        s.noise = 0.5;
        for i in 0..20 {
            let a = gen_content(&s, i);
            assert_eq!(a, gen_content(&s, i));
            assert_eq!(a.shape(), Shape::new(1, 3, 16, 16));
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn palettes_shift_channel_means() {
    let (mut a, mut b) = (small("A", 1), small("B", 1));
    a.palette = [0.2, 0.5, 0.8];
    b.palette = [0.6, 0.5, 0.3];
    let mean_over = |s: &SourceSpec| {
        let mut acc = [0.0; 3];
        for i in 0..100 {
            let m = channel_means(&gen_content(s, i));
            (0..3).for_each(|c| acc[c] += m[c] / 100.0);
        }
        acc
    };
    let (ma, mb) = (mean_over(&a), mean_over(&b));
    for c in [0, 2] {
        assert!((ma[c] - mb[c]).abs() >= 0.5 * (a.palette[c] - b.palette[c]).abs(), "channel {c}: {ma:?} vs {mb:?}");
    }
}

#[test]
fn injector_examples() {
    let mut s = small("A", 1);
    let img = gen_content(&s, 3);
    for injector in [Injector::CheckerboardUpsample, Injector::SpectralPeak, Injector::BlockQuantize] {
        s.injector = injector;
        s.strength = 1e-9;
        let out = inject_artifact(&img, &s);
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        s.strength = 1.0;
        assert!(inject_artifact(&img, &s).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    s.injector = Injector::CheckerboardUpsample;
    s.period = 2;
    let cb = inject_artifact(&img, &s);
    for c in 0..3 {
        for y in (0..16).step_by(2) {
            for x in (0..16).step_by(2) {
                let v = cb.at(0, c, y, x);
                assert!([(0, 1), (1, 0), (1, 1)].iter().all(|&(dy, dx)| cb.at(0, c, y + dy, x + dx) == v));
            }
        }
    }

    let mut spec = make_benchmark(0)[4].clone();
    spec.injector = Injector::SpectralPeak;
    spec.period = 8;
    spec.strength = 0.4;
    let zero = Tensor::zeros(Shape::new(1, 3, 64, 64)).unwrap();
    let peak = inject_artifact(&zero, &spec).max_value();
    assert!((peak - 0.2).abs() < 1e-12, "{peak}");
}

#[test]
fn spectral_fakes_have_more_edge_energy() {
    let sobel = build_operator::<f64>(&"sobel".parse().unwrap()).unwrap();
    let energy = |t: &Tensor| sobel.apply(t).unwrap().data().iter().map(|v| v.abs()).sum::<f64>() / t.shape().len() as f64;
    for spec in make_benchmark(0).into_iter().filter(|s| s.injector == Injector::SpectralPeak) {
        let (mut real, mut fake) = (0.0, 0.0);
        for j in 0..20 {
            let (r, f) = gen_pair(&spec, j);
            real += energy(&r);
            fake += energy(&f);
        }
        assert!(fake > real, "{}: {fake} <= {real}", spec.id);
    }
}

#[test]
fn gen_source_writes_balanced_deterministic_files() {
    let spec = small("S9", 10);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = gen_source(&spec, a.path()).unwrap();
    let rb = gen_source(&spec, b.path()).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.len(), 20);
    assert_eq!(ra.iter().filter(|r| r.label == 1).count(), 10);
    assert_eq!(ra.iter().map(|r| &r.path).collect::<BTreeSet<_>>().len(), 20);
    for pair in ra.chunks(2) {
        let real = std::fs::read(a.path().join(&pair[0].path)).unwrap();
        let fake = std::fs::read(a.path().join(&pair[1].path)).unwrap();
        assert_eq!(real, std::fs::read(b.path().join(&pair[0].path)).unwrap());
        assert_ne!(real, fake);
        let img = decode_pnm(&real, "r").unwrap();
        assert_eq!((img.width, img.height, img.pixels.len()), (16, 16, 16 * 16 * 3));
    }
    assert!(gen_source(&SourceSpec { strength: 0.0, ..spec }, a.path()).is_err());
}

#[test]
fn benchmark_roster() {
    let specs = make_benchmark(0);
    assert_eq!(specs, make_benchmark(0));
    assert_ne!(specs[0].seed, make_benchmark(1)[0].seed);
    assert_eq!(specs.len(), 6);
    assert_eq!(specs[0].count, 2000);
    assert!(specs[1..].iter().all(|s| s.count == 250));
    let combos: BTreeSet<String> = specs
        .iter()
        .map(|s| format!("{:?}{}{:?}{}{}", s.palette, s.texture, s.texture_scale, s.injector, s.strength))
        .collect();
    assert_eq!(combos.len(), 6);
    assert!(specs[1..].iter().filter(|s| s.injector != specs[0].injector).count() >= 3);
    assert!(specs[1..].iter().all(|s| (0.3..=0.7).contains(&s.strength)));
    assert!(specs.iter().all(|s| s.validate().is_ok()));
}

#[test]
fn disk_and_memory_benchmarks_agree() {
    let specs = vec![small("T", 6), small("U", 3), { let mut s = small("V", 3); s.injector = Injector::BlockQuantize; s }];
    let dir = tempfile::tempdir().unwrap();
    write_benchmark(&specs, dir.path()).unwrap();
    let (train, tests) = benchmark_images(&specs).unwrap();
    let train_m = read_manifest(&dir.path().join(TRAIN_MANIFEST)).unwrap();
    assert_eq!(ImageSet::load(&train_m).unwrap(), train);
    let test_m = read_manifest(&dir.path().join(TEST_MANIFEST)).unwrap();
    let loaded = load_sources(&test_m).unwrap();
    assert_eq!(loaded, tests);
    assert_eq!(loaded.keys().cloned().collect::<Vec<_>>(), ["T", "U", "V"]);
    assert_eq!(loaded["T"].len(), 6);
    // The holdout never repeats a training image.
    let train_paths: BTreeSet<_> = train_m.records.iter().map(|r| r.path.replacen("train/", "", 1)).collect();
    assert!(test_m.records.iter().all(|r| !train_paths.contains(&r.path.replacen("test/", "", 1))));
}
