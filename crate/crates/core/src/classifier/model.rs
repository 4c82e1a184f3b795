//! The trainable head: conv(3×3, s2) → ReLU → conv(3×3, s2) → ReLU →
//! global average pool → affine, two logits per sample.
//!
//! Gradients are derived by hand; the cache of a forward pass keeps the
//! post-activation maps and recomputes patch matrices on the way back.

use crate::error::{Error, Result};
use crate::linalg::{gemm, Mat, Patches};
use crate::rng::Stream;
use crate::tensor::{Shape, Tensor};

pub const CONV1_OUT: usize = 16;
pub const CONV2_OUT: usize = 32;
pub const CLASSES: usize = 2;
const K: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Parameter names in storage order.
pub const PARAM_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "fc.weight",
    "fc.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    c_in: usize,
    /// `(16, c_in, 3, 3)`.
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    /// `(32, 16, 3, 3)`.
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// `32 × 2`, row-major: `fc_w[j * 2 + k]` maps pooled feature `j` to logit `k`.
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(c_in: usize) -> Self {
        ModelParams {
            c_in,
            conv1_w: vec![0.0; CONV1_OUT * c_in * K * K],
            conv1_b: vec![0.0; CONV1_OUT],
            conv2_w: vec![0.0; CONV2_OUT * CONV1_OUT * K * K],
            conv2_b: vec![0.0; CONV2_OUT],
            fc_w: vec![0.0; CONV2_OUT * CLASSES],
            fc_b: vec![0.0; CLASSES],
        }
    }

    /// Weights uniform on `±1/sqrt(fan_in)` from stream `(seed, "init", layer)`,
    /// biases zero.
    pub fn init(c_in: usize, seed: u64) -> Self {
        let mut p = ModelParams::zeros(c_in);
        let fill = |w: &mut [f64], fan_in: usize, layer: u64| {
            let b = 1.0 / (fan_in as f64).sqrt();
            let mut rng = Stream::derive(seed, "init", layer);
            w.iter_mut().for_each(|v| *v = rng.range(-b, b));
        };
        fill(&mut p.conv1_w, c_in * K * K, 0);
        fill(&mut p.conv2_w, CONV1_OUT * K * K, 1);
        fill(&mut p.fc_w, CONV2_OUT, 2);
        p
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    /// NTF-style `(n, c, h, w)` shape of each parameter, in [`PARAM_NAMES`] order.
    pub fn shapes(&self) -> [Shape; 6] {
        [
            Shape::new(CONV1_OUT, self.c_in, K, K),
            Shape::new(1, 1, 1, CONV1_OUT),
            Shape::new(CONV2_OUT, CONV1_OUT, K, K),
            Shape::new(1, 1, 1, CONV2_OUT),
            Shape::new(1, 1, CONV2_OUT, CLASSES),
            Shape::new(1, 1, 1, CLASSES),
        ]
    }

    pub fn slices(&self) -> [&[f64]; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc_w,
            &self.fc_b,
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    /// Rebuilds parameters from tensors in [`PARAM_NAMES`] order.
    pub fn from_slices(c_in: usize, parts: [Vec<f64>; 6]) -> Result<Self> {
        let mut p = ModelParams::zeros(c_in);
        for ((dst, src), name) in p.slices_mut().into_iter().zip(parts).zip(PARAM_NAMES) {
            if dst.len() != src.len() {
                return Err(Error::shape(format!(
                    "{name}: expected {} values, got {}",
                    dst.len(),
                    src.len()
                )));
            }
            if src.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.to_string()));
            }
            dst.copy_from_slice(&src);
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Every value rounded to the nearest `f32` (checkpoint precision).
    pub fn rounded_to_f32(&self) -> Self {
        let mut p = self.clone();
        for s in p.slices_mut() {
            s.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        p
    }
}

/// Intermediates of one forward pass.
pub struct ForwardCache<'a> {
    input: &'a Tensor,
    p1: Patches,
    p2: Patches,
    /// Post-ReLU conv1 maps, `n × 16 × oh1 × ow1`.
    a1: Vec<f64>,
    /// Post-ReLU conv2 maps, `n × 32 × oh2 × ow2`.
    a2: Vec<f64>,
    /// Pooled features, `n × 32`.
    pub pooled: Vec<f64>,
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn add_bias_rows(out: &mut [f64], bias: &[f64], cols: usize) {
    for (row, b) in out.chunks_exact_mut(cols).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

/// Logits `(n, 2)` and the cache needed by [`backward`].
pub fn forward<'a>(params: &ModelParams, features: &'a Tensor) -> Result<(Vec<[f64; 2]>, ForwardCache<'a>)> {
    let s = features.shape();
    if s.c != params.c_in {
        return Err(Error::config(format!(
            "classifier expects {} feature channels, got {}",
            params.c_in, s.c
        )));
    }
    let p1 = Patches::new(s.c, s.h, s.w, K, K, STRIDE, PAD)
        .ok_or_else(|| Error::shape(format!("features {s} too small for the classifier")))?;
    let p2 = Patches::new(CONV1_OUT, p1.oh, p1.ow, K, K, STRIDE, PAD)
        .ok_or_else(|| Error::shape(format!("features {s} too small for the classifier")))?;
    let (n1, n2) = (p1.cols(), p2.cols());
    let mut a1 = vec![0.0; s.n * CONV1_OUT * n1];
    let mut a2 = vec![0.0; s.n * CONV2_OUT * n2];
    let mut pooled = vec![0.0; s.n * CONV2_OUT];
    let mut cols1 = vec![0.0; p1.rows() * n1];
    let mut cols2 = vec![0.0; p2.rows() * n2];
    let mut logits = Vec::with_capacity(s.n);
    for n in 0..s.n {
        p1.im2col(features.sample_data(n), |v| v, &mut cols1);
        let z1 = &mut a1[n * CONV1_OUT * n1..(n + 1) * CONV1_OUT * n1];
        gemm(
            Mat::new(&params.conv1_w, CONV1_OUT, p1.rows()),
            Mat::new(&cols1, p1.rows(), n1),
            0.0,
            z1,
        );
        add_bias_rows(z1, &params.conv1_b, n1);
        relu_in_place(z1);

        p2.im2col(z1, |v| v, &mut cols2);
        let z2 = &mut a2[n * CONV2_OUT * n2..(n + 1) * CONV2_OUT * n2];
        gemm(
            Mat::new(&params.conv2_w, CONV2_OUT, p2.rows()),
            Mat::new(&cols2, p2.rows(), n2),
            0.0,
            z2,
        );
        add_bias_rows(z2, &params.conv2_b, n2);
        relu_in_place(z2);

        let g = &mut pooled[n * CONV2_OUT..(n + 1) * CONV2_OUT];
        for (gj, row) in g.iter_mut().zip(z2.chunks_exact(n2)) {
            *gj = row.iter().sum::<f64>() / n2 as f64;
        }
        let mut l = [params.fc_b[0], params.fc_b[1]];
        for (j, gj) in g.iter().enumerate() {
            l[0] += gj * params.fc_w[j * CLASSES];
            l[1] += gj * params.fc_w[j * CLASSES + 1];
        }
        logits.push(l);
    }
    Ok((
        logits,
        ForwardCache {
            input: features,
            p1,
            p2,
            a1,
            a2,
            pooled,
        },
    ))
}

/// Exact gradients of `Σ_n dlogits[n] · logits[n]` with respect to every parameter.
pub fn backward(params: &ModelParams, cache: &ForwardCache<'_>, dlogits: &[[f64; 2]]) -> ModelParams {
    let n_batch = cache.input.shape().n;
    assert_eq!(dlogits.len(), n_batch, "dlogits must match the cached batch");
    let (p1, p2) = (cache.p1, cache.p2);
    let (n1, n2) = (p1.cols(), p2.cols());
    let mut g = ModelParams::zeros(params.c_in);

    let mut cols1 = vec![0.0; p1.rows() * n1];
    let mut cols2 = vec![0.0; p2.rows() * n2];
    let mut dz2 = vec![0.0; CONV2_OUT * n2];
    let mut dcols2 = vec![0.0; p2.rows() * n2];
    let mut dz1 = vec![0.0; CONV1_OUT * n1];

    for (n, dl) in dlogits.iter().enumerate() {
        let pooled = &cache.pooled[n * CONV2_OUT..(n + 1) * CONV2_OUT];
        for (j, gj) in pooled.iter().enumerate() {
            g.fc_w[j * CLASSES] += gj * dl[0];
            g.fc_w[j * CLASSES + 1] += gj * dl[1];
        }
        g.fc_b[0] += dl[0];
        g.fc_b[1] += dl[1];

        // Through the pool and the second ReLU.
        let a2 = &cache.a2[n * CONV2_OUT * n2..(n + 1) * CONV2_OUT * n2];
        for j in 0..CONV2_OUT {
            let dpool = (dl[0] * params.fc_w[j * CLASSES] + dl[1] * params.fc_w[j * CLASSES + 1]) / n2 as f64;
            let mut bsum = 0.0;
            for p in 0..n2 {
                let v = if a2[j * n2 + p] > 0.0 { dpool } else { 0.0 };
                dz2[j * n2 + p] = v;
                bsum += v;
            }
            g.conv2_b[j] += bsum;
        }
        let a1 = &cache.a1[n * CONV1_OUT * n1..(n + 1) * CONV1_OUT * n1];
        p2.im2col(a1, |v| v, &mut cols2);
        gemm(
            Mat::new(&dz2, CONV2_OUT, n2),
            Mat::new(&cols2, p2.rows(), n2).t(),
            1.0,
            &mut g.conv2_w,
        );

        // Back into conv1's output and through the first ReLU.
        gemm(
            Mat::new(&params.conv2_w, CONV2_OUT, p2.rows()).t(),
            Mat::new(&dz2, CONV2_OUT, n2),
            0.0,
            &mut dcols2,
        );
        dz1.fill(0.0);
        p2.col2im_add(&dcols2, &mut dz1);
        for (d, a) in dz1.iter_mut().zip(a1) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        for (b, row) in g.conv1_b.iter_mut().zip(dz1.chunks_exact(n1)) {
            *b += row.iter().sum::<f64>();
        }
        p1.im2col(cache.input.sample_data(n), |v| v, &mut cols1);
        gemm(
            Mat::new(&dz1, CONV1_OUT, n1),
            Mat::new(&cols1, p1.rows(), n1).t(),
            1.0,
            &mut g.conv1_w,
        );
    }
    g
}
