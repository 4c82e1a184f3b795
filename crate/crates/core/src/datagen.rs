//! Synthetic multi-source data: procedural content crossed with
//! generator-style artifacts.
//!
//! Real image `j` of a source is `gen_content(spec, 2j)`; fake image `j` is
//! `inject_artifact(gen_content(spec, 2j + 1) + fake_tint)`, with `j` counted from
//! `spec.first_index`. Every image depends only on `(spec, index)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::classifier::ImageSet;
use crate::error::{Error, Result};
use crate::io::manifest::{write_manifest, DatasetManifest, Record};
use crate::io::pnm::{encode_pnm, ImageFile};
use crate::io::write_atomic;
use crate::rng::Stream;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Blobs,
    Stripes,
    SmoothNoise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Injector {
    /// Mean-downsample by `period`, nearest-upsample, blend.
    CheckerboardUpsample,
    /// Add `0.5·strength·sin(2π·period·x/W)·sin(2π·period·y/H)`.
    SpectralPeak,
    /// Replace `period × period` blocks by their 4-bit mean, blend.
    BlockQuantize,
}

macro_rules! string_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($v),)+
                    _ => Err(Error::config(format!(concat!("unknown ", $what, " `{}`"), s))),
                }
            }
        }
    };
}

string_enum!(Texture, "texture", Texture::Blobs => "blobs", Texture::Stripes => "stripes", Texture::SmoothNoise => "smooth-noise");
string_enum!(Injector, "injector",
    Injector::CheckerboardUpsample => "checkerboard-upsample",
    Injector::SpectralPeak => "spectral-peak",
    Injector::BlockQuantize => "block-quantize");

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpec {
    pub id: String,
    /// Per-channel mean of the content.
    pub palette: [f64; 3],
    pub texture: Texture,
    /// Feature size as a fraction of the image side.
    pub texture_scale: f64,
    /// Standard deviation of per-pixel sensor noise.
    pub noise: f64,
    /// Colour cast the generator adds to its content, per channel.
    pub fake_tint: [f64; 3],
    pub injector: Injector,
    pub strength: f64,
    /// Upsample factor, cycles per image, or block side, by injector.
    pub period: usize,
    pub seed: u64,
    /// Images per class.
    pub count: usize,
    /// Pair index of the first image, so disjoint splits share a spec.
    pub first_index: usize,
    pub size: usize,
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("source `{}`: {msg}", self.id)));
        if self.id.is_empty() || self.id.contains(|c: char| c.is_whitespace() || c == '/' || c == '\\') {
            return bad("id must be non-empty without whitespace or slashes".into());
        }
        if !self.palette.iter().all(|m| (0.0..=1.0).contains(m)) {
            return bad(format!("palette {:?} outside [0, 1]", self.palette));
        }
        if !self.fake_tint.iter().all(|t| t.abs() <= 0.5) {
            return bad(format!("fake_tint {:?} outside [-0.5, 0.5]", self.fake_tint));
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return bad(format!("strength {} outside (0, 1]", self.strength));
        }
        if !(self.texture_scale > 0.0 && self.texture_scale.is_finite()) {
            return bad(format!("texture_scale {} must be positive", self.texture_scale));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        if self.count == 0 {
            return bad("count must be at least 1".into());
        }
        if self.period == 0 || self.period > self.size {
            return bad(format!("period {} must be in 1..={}", self.period, self.size));
        }
        if self.size < 8 {
            return bad(format!("size {} is below 8", self.size));
        }
        Ok(())
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Value noise on a lattice with `cell` pixels between nodes, roughly in [-1, 1].
fn value_noise(rng: &mut Stream, size: usize, cell: f64) -> Vec<f64> {
    let nodes = (size as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..nodes * nodes).map(|_| rng.range(-1.0, 1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..size {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |j: usize, i: usize| lattice[j * nodes + i];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

fn luminance_field(rng: &mut Stream, spec: &SourceSpec) -> Vec<f64> {
    let n = spec.size;
    let feature = (spec.texture_scale * n as f64).max(1.0);
    let mut field = vec![0.0; n * n];
    match spec.texture {
        Texture::Blobs => {
            for _ in 0..8 {
                let (cx, cy) = (rng.range(0.0, n as f64), rng.range(0.0, n as f64));
                let r = feature * rng.range(0.5, 1.5);
                let a = rng.range(-1.0, 1.0);
                for y in 0..n {
                    for x in 0..n {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        field[y * n + x] += a * (-d2 / (2.0 * r * r)).exp();
                    }
                }
            }
        }
        Texture::Stripes => {
            for _ in 0..3 {
                let theta = rng.range(0.0, PI);
                let k = 2.0 * PI / (feature * rng.range(0.6, 1.4));
                let (kx, ky) = (k * theta.cos(), k * theta.sin());
                let phase = rng.range(0.0, 2.0 * PI);
                let a = rng.range(0.3, 0.6);
                for y in 0..n {
                    for x in 0..n {
                        field[y * n + x] += a * (kx * x as f64 + ky * y as f64 + phase).sin();
                    }
                }
            }
        }
        Texture::SmoothNoise => {
            let coarse = value_noise(rng, n, feature);
            let fine = value_noise(rng, n, (feature / 2.0).max(1.0));
            for ((f, c), d) in field.iter_mut().zip(coarse).zip(fine) {
                *f = c + 0.5 * d;
            }
        }
    }
    field
}

/// Content image `(1, 3, size, size)` in [0, 1]: a luminance field and a
/// coarse chroma field around the palette, plus sensor noise.
pub fn gen_content(spec: &SourceSpec, index: u64) -> Tensor {
    let mut rng = Stream::derive(spec.seed, "content", index);
    let n = spec.size;
    let lum = luminance_field(&mut rng, spec);
    let mut data = Vec::with_capacity(3 * n * n);
    for mean in spec.palette {
        let chroma = value_noise(&mut rng, n, n as f64 / 2.0);
        for (l, c) in lum.iter().zip(chroma) {
            let v = mean + 0.3 * l + 0.08 * c + spec.noise * rng.normal();
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::from_parts(Shape::new(1, 3, n, n), data)
}

/// Per-channel means of `block × block` tiles (partial tiles at the edges),
/// broadcast back to full resolution.
fn block_means(plane: &[f64], h: usize, w: usize, block: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
            let mut sum = 0.0;
            for y in by..ey {
                sum += plane[y * w + bx..y * w + ex].iter().sum::<f64>();
            }
            let mean = sum / ((ey - by) * (ex - bx)) as f64;
            for y in by..ey {
                out[y * w + bx..y * w + ex].fill(mean);
            }
        }
    }
    out
}

/// Adds the source's artifact to every image of the batch; output in [0, 1].
pub fn inject_artifact(image: &Tensor, spec: &SourceSpec) -> Tensor {
    let s = image.shape();
    let (h, w) = (s.h, s.w);
    let strength = spec.strength;
    let mut data = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = image.plane(n, c);
            match spec.injector {
                Injector::CheckerboardUpsample | Injector::BlockQuantize => {
                    let mut target = block_means(plane, h, w, spec.period);
                    if spec.injector == Injector::BlockQuantize {
                        target.iter_mut().for_each(|v| *v = (*v * 15.0).round() / 15.0);
                    }
                    data.extend(plane.iter().zip(target).map(|(x, t)| ((1.0 - strength) * x + strength * t).clamp(0.0, 1.0)));
                }
                Injector::SpectralPeak => {
                    let f = spec.period as f64;
                    for y in 0..h {
                        let sy = (2.0 * PI * f * y as f64 / h as f64).sin();
                        for x in 0..w {
                            let sx = (2.0 * PI * f * x as f64 / w as f64).sin();
                            data.push((plane[y * w + x] + 0.5 * strength * sx * sy).clamp(0.0, 1.0));
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(s, data)
}

/// Real (`label 0`) and fake (`label 1`) image `j` of the source.
pub fn gen_pair(spec: &SourceSpec, j: usize) -> (Tensor, Tensor) {
    let i = (spec.first_index + j) as u64;
    let content = gen_content(spec, 2 * i + 1);
    let s = content.shape();
    let mut data = content.into_data();
    for (plane, tint) in data.chunks_exact_mut(s.plane()).zip(spec.fake_tint) {
        plane.iter_mut().for_each(|v| *v = (*v + tint).clamp(0.0, 1.0));
    }
    (gen_content(spec, 2 * i), inject_artifact(&Tensor::from_parts(s, data), spec))
}

/// The source's images in memory, real and fake interleaved, quantized to
/// bytes exactly as [`gen_source`] writes them.
pub fn source_images(spec: &SourceSpec) -> Result<ImageSet> {
    spec.validate()?;
    let mut set = ImageSet::default();
    for j in 0..spec.count {
        let (real, fake) = gen_pair(spec, j);
        set.push(&real, 0)?;
        set.push(&fake, 1)?;
    }
    Ok(set)
}

/// Writes `<outdir>/<id>/{real,fake}/NNNNN.ppm` and returns the records,
/// paths relative to `outdir`.
pub fn gen_source(spec: &SourceSpec, outdir: &Path) -> Result<Vec<Record>> {
    spec.validate()?;
    let mut records = Vec::with_capacity(2 * spec.count);
    for j in 0..spec.count {
        let (real, fake) = gen_pair(spec, j);
        for (label, class, img) in [(0u8, "real", real), (1, "fake", fake)] {
            let rel = format!("{}/{class}/{:05}.ppm", spec.id, spec.first_index + j);
            write_atomic(&outdir.join(&rel), &encode_pnm(&ImageFile::from_tensor(&img)?))?;
            records.push(Record {
                path: rel,
                label,
                source: spec.id.clone(),
            });
        }
    }
    Ok(records)
}

/// Training source, then the five unseen test sources.
pub fn make_benchmark(seed: u64) -> Vec<SourceSpec> {
    let spec = |i: u64, palette, texture, texture_scale, fake_tint, injector, strength, period, count| SourceSpec {
        id: format!("S{i}"),
        palette,
        fake_tint,
        texture,
        texture_scale,
        noise: 0.03,
        injector,
        strength,
        period,
        seed: crate::rng::derive_seed(seed, "source", i),
        count,
        first_index: 0,
        size: DEFAULT_SIZE,
    };
    use Injector::*;
    use Texture::*;
    vec![
        spec(0, [0.55, 0.45, 0.40], Blobs, 0.15, [0.04, 0.01, -0.03], CheckerboardUpsample, 0.6, 2, 2000),
        spec(1, [0.30, 0.50, 0.65], Stripes, 0.20, [-0.03, 0.00, 0.04], CheckerboardUpsample, 0.5, 2, 250),
        spec(2, [0.70, 0.65, 0.45], SmoothNoise, 0.25, [0.00, 0.03, 0.00], SpectralPeak, 0.3, 16, 250),
        spec(3, [0.25, 0.20, 0.30], Blobs, 0.10, [0.02, -0.03, 0.01], BlockQuantize, 0.5, 4, 250),
        spec(4, [0.50, 0.55, 0.50], Stripes, 0.10, [-0.02, -0.02, -0.02], SpectralPeak, 0.4, 8, 250),
        spec(5, [0.40, 0.30, 0.60], SmoothNoise, 0.15, [0.00, -0.02, 0.03], BlockQuantize, 0.7, 8, 250),
    ]
}

/// Images of the training source never used for training, for in-source scores.
pub fn holdout(train: &SourceSpec, count: usize) -> SourceSpec {
    SourceSpec {
        first_index: train.first_index + train.count,
        count,
        ..train.clone()
    }
}

/// The same split as [`write_benchmark`], kept in memory: training images
/// and one test set per source, the training source's holdout included.
pub fn benchmark_images(specs: &[SourceSpec]) -> Result<(ImageSet, BTreeMap<String, ImageSet>)> {
    let (train, tests) = specs
        .split_first()
        .ok_or_else(|| Error::config("a benchmark needs at least a training source"))?;
    let test_count = tests.first().map_or(train.count, |t| t.count);
    let mut sets = BTreeMap::new();
    sets.insert(train.id.clone(), source_images(&holdout(train, test_count))?);
    for t in tests {
        sets.insert(t.id.clone(), source_images(t)?);
    }
    Ok((source_images(train)?, sets))
}

/// On-disk layout of a generated benchmark.
pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const TEST_MANIFEST: &str = "test.tsv";

/// Writes the training source under `train/` and the held-out training
/// images plus every test source under `test/`, each with its manifest.
pub fn write_benchmark(specs: &[SourceSpec], outdir: &Path) -> Result<(DatasetManifest, DatasetManifest)> {
    let (train, tests) = specs
        .split_first()
        .ok_or_else(|| Error::config("a benchmark needs at least a training source"))?;
    specs.iter().try_for_each(SourceSpec::validate)?;
    let test_count = tests.first().map_or(train.count, |t| t.count);
    let under = |dir: &str, records: Vec<Record>| -> Vec<Record> {
        records
            .into_iter()
            .map(|r| Record {
                path: format!("{dir}/{}", r.path),
                ..r
            })
            .collect()
    };
    let train_m = DatasetManifest::new(outdir, under("train", gen_source(train, &outdir.join("train"))?))?;
    let test_dir = outdir.join("test");
    let mut test_records = gen_source(&holdout(train, test_count), &test_dir)?;
    for t in tests {
        test_records.extend(gen_source(t, &test_dir)?);
    }
    let test_m = DatasetManifest::new(outdir, under("test", test_records))?;
    write_manifest(&train_m, &outdir.join(TRAIN_MANIFEST))?;
    write_manifest(&test_m, &outdir.join(TEST_MANIFEST))?;
    Ok((train_m, test_m))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(injector: Injector) -> SourceSpec {
        SourceSpec {
            count: 3,
            injector,
            ..make_benchmark(7)[0].clone()
        }
    }

    #[test]
    fn content_is_deterministic_and_clamped() {
        for texture in [Texture::Blobs, Texture::Stripes, Texture::SmoothNoise] {
            let s = SourceSpec {
                texture,
                ..spec(Injector::SpectralPeak)
            };
            let a = gen_content(&s, 4);
            assert_eq!(a, gen_content(&s, 4));
            assert_ne!(a, gen_content(&s, 5));
            assert!(a.min_value() >= 0.0 && a.max_value() <= 1.0);
        }
    }

    #[test]
    fn spectral_peak_extremum() {
        let s = SourceSpec {
            period: 8,
            strength: 0.4,
            ..spec(Injector::SpectralPeak)
        };
        let zero = Tensor::zeros(Shape::new(1, 3, 64, 64)).unwrap();
        let out = inject_artifact(&zero, &s);
        assert!((out.max_value() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_full_strength_is_block_constant() {
        let s = SourceSpec {
            strength: 1.0,
            ..spec(Injector::CheckerboardUpsample)
        };
        let out = inject_artifact(&gen_content(&s, 0), &s);
        for c in 0..3 {
            for y in (0..64).step_by(2) {
                for x in (0..64).step_by(2) {
                    let v = out.at(0, c, y, x);
                    assert_eq!([out.at(0, c, y, x + 1), out.at(0, c, y + 1, x), out.at(0, c, y + 1, x + 1)], [v; 3]);
                }
            }
        }
    }

    #[test]
    fn tiny_strength_is_continuous() {
        for inj in [Injector::CheckerboardUpsample, Injector::SpectralPeak, Injector::BlockQuantize] {
            let s = SourceSpec {
                strength: 1e-9,
                ..spec(inj)
            };
            let x = gen_content(&s, 1);
            let y = inject_artifact(&x, &s);
            assert!(x.data().iter().zip(y.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn benchmark_roster() {
        let b = make_benchmark(0);
        assert_eq!(b.len(), 6);
        assert_eq!(b, make_benchmark(0));
        assert_ne!(b, make_benchmark(1));
        for s in &b {
            s.validate().unwrap();
        }
        for i in 0..6 {
            for j in i + 1..6 {
                let key = |s: &SourceSpec| (s.texture, s.palette.map(f64::to_bits), s.injector, s.strength.to_bits());
                assert_ne!(key(&b[i]), key(&b[j]));
            }
        }
        assert!(b[1..].iter().filter(|s| s.injector != b[0].injector).count() >= 3);
        assert_eq!((b[0].count, b[1].count), (2000, 250));
    }

    #[test]
    fn validation() {
        let ok = spec(Injector::BlockQuantize);
        for bad in [
            SourceSpec { strength: 0.0, ..ok.clone() },
            SourceSpec { strength: 1.1, ..ok.clone() },
            SourceSpec { palette: [0.5, 1.2, 0.0], ..ok.clone() },
            SourceSpec { count: 0, ..ok.clone() },
            SourceSpec { id: "a b".into(), ..ok.clone() },
            SourceSpec { period: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        for t in ["blobs", "stripes", "smooth-noise"] {
            assert_eq!(t.parse::<Texture>().unwrap().to_string(), t);
        }
        assert!("checker".parse::<Injector>().is_err());
    }
}
