#![allow(dead_code)]

use dio::classifier::model::PARAM_NAMES;
use dio::classifier::{backward, cross_entropy, forward, ModelParams};
use dio::io::checkpoint::Checkpoint;
use dio::io::manifest::Record;
use dio::io::{DatasetManifest, ImageFile, PnmKind};
use dio::rng::Stream;
use dio::{Kernel, Provenance, Shape, Tensor};

pub fn random_tensor(rng: &mut Stream, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.range(-1.0, 1.0)).unwrap()
}

pub fn random_image(rng: &mut Stream, n: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(Shape::new(n, 3, h, w), |_, _, _, _| rng.uniform()).unwrap()
}

pub fn random_kernel(rng: &mut Stream, out_c: usize, in_c: usize, kh: usize, kw: usize) -> Kernel {
    let w = (0..out_c * in_c * kh * kw).map(|_| rng.range(-1.0, 1.0)).collect();
    Kernel::new(out_c, in_c, kh, kw, w, Provenance::Random(0)).unwrap()
}

/// Straight seven-loop cross-correlation with zero padding.
pub fn naive_conv(x: &Tensor, k: &Kernel, stride: usize, pad: usize) -> Tensor {
    let s = x.shape();
    let oh = (s.h + 2 * pad - k.kh()) / stride + 1;
    let ow = (s.w + 2 * pad - k.kw()) / stride + 1;
    Tensor::from_fn(Shape::new(s.n, k.out_c(), oh, ow), |n, o, y, xx| {
        let mut acc = 0.0;
        for i in 0..s.c {
            for ky in 0..k.kh() {
                for kx in 0..k.kw() {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xx * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                        acc += x.at(n, i, iy as usize, ix as usize) * k.weight(o, i, ky, kx);
                    }
                }
            }
        }
        acc
    })
    .unwrap()
}

pub fn naive_pool(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let s = x.shape();
    let (oh, ow) = ((s.h - k) / stride + 1, (s.w - k) / stride + 1);
    Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, xx| {
        let mut acc = 0.0;
        for ky in 0..k {
            for kx in 0..k {
                acc += x.at(n, c, y * stride + ky, xx * stride + kx);
            }
        }
        acc / (k * k) as f64
    })
    .unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Each positive's rank and hit count found by scanning every other sample.
pub fn brute_force_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let mut terms: Vec<(usize, f64)> = Vec::new();
    for i in 0..scores.len() {
        if labels[i] != 1 {
            continue;
        }
        let ahead = |j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
        let rank = 1 + (0..scores.len()).filter(|&j| ahead(j)).count();
        let hits = 1 + (0..scores.len()).filter(|&j| ahead(j) && labels[j] == 1).count();
        terms.push((rank, hits as f64 / rank as f64));
    }
    terms.sort_by_key(|t| t.0);
    terms.iter().map(|t| t.1).sum::<f64>() / positives as f64
}

pub fn random_pnm(rng: &mut Stream) -> ImageFile {
    let kind = if rng.below(2) == 0 { PnmKind::P5 } else { PnmKind::P6 };
    let (width, height) = (1 + rng.below(12) as usize, 1 + rng.below(12) as usize);
    let pixels = (0..width * height * kind.channels()).map(|_| rng.below(256) as u8).collect();
    ImageFile { kind, width, height, pixels }
}

pub fn random_f32_tensor(rng: &mut Stream) -> Tensor<f32> {
    let s = Shape::new(1 + rng.below(3) as usize, 1 + rng.below(4) as usize, 1 + rng.below(5) as usize, 1 + rng.below(5) as usize);
    Tensor::from_fn(s, |_, _, _, _| f32::from_bits(rng.next_u64() as u32 & 0x3fff_ffff) * if rng.below(2) == 0 { -1.0 } else { 1.0 }).unwrap()
}

pub fn random_checkpoint(rng: &mut Stream) -> Checkpoint {
    let mut ck = Checkpoint::default();
    for i in 0..rng.below(4) {
        ck.push_meta(format!("key.{i}"), format!("value {} = {}", rng.next_u64(), rng.uniform()));
    }
    for i in 0..rng.below(4) {
        ck.tensors.push((format!("t{i}"), random_f32_tensor(rng)));
    }
    ck
}

pub fn random_manifest(rng: &mut Stream) -> DatasetManifest {
    let records = (0..rng.below(20))
        .map(|i| Record {
            path: format!("S{}/img {i:03}.ppm", rng.below(3)),
            label: rng.below(2) as u8,
            source: format!("S{}", rng.below(3)),
        })
        .collect();
    DatasetManifest::new("root", records).unwrap()
}

fn loss_of(p: &ModelParams, x: &Tensor, labels: &[u8]) -> f64 {
    cross_entropy(&forward(p, x).unwrap().0, labels).0
}

/// Central differences on every parameter of a `(2, c, 8, 8)` problem.
/// Returns the worst relative error among non-negligible gradients.
pub fn gradient_check(c: usize) -> Result<f64, String> {
    let mut rng = Stream::new(100 + c as u64);
    let mut p = ModelParams::init(c, 5);
    for b in p.conv1_b.iter_mut().chain(&mut p.conv2_b).chain(&mut p.fc_b) {
        *b = rng.range(-0.1, 0.1);
    }
    let x = random_tensor(&mut rng, Shape::new(2, c, 8, 8));
    let labels = [0u8, 1];
    let (logits, cache) = forward(&p, &x).unwrap();
    let (_, dlogits) = cross_entropy(&logits, &labels);
    let g = backward(&p, &cache, &dlogits);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for t in 0..6 {
        for i in 0..p.slices()[t].len() {
            let mut plus = p.clone();
            plus.slices_mut()[t][i] += h;
            let mut minus = p.clone();
            minus.slices_mut()[t][i] -= h;
            let numeric = (loss_of(&plus, &x, &labels) - loss_of(&minus, &x, &labels)) / (2.0 * h);
            let analytic = g.slices()[t][i];
            if analytic.abs() < 1e-8 && numeric.abs() < 1e-8 {
                if (analytic - numeric).abs() >= 1e-7 {
                    return Err(format!("C={c} {}[{i}]: {analytic:e} vs {numeric:e}", PARAM_NAMES[t]));
                }
            } else {
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
                if rel >= 1e-4 {
                    return Err(format!("C={c} {}[{i}]: {analytic:e} vs {numeric:e} (rel {rel:e})", PARAM_NAMES[t]));
                }
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

/// The small two-source experiment shared by the command-line tests.
pub fn small_config(data: &std::path::Path) -> String {
    include_str!("../golden/small.cfg").replace("@DATA@", &data.display().to_string())
}

/// FNV-1a over the little-endian bytes of every weight.
pub fn checksum(k: &Kernel) -> u64 {
    k.weights().iter().flat_map(|w| w.to_le_bytes()).fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub const GOLDEN_RANDOM_88_64_1: u64 = 0xbb05_b7a6_7e5a_c9c1;
