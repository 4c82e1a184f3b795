//! Dense `(n, c, h, w)` tensors and the filtering primitives built on them.
//!
//! All reductions accumulate in `f64` whatever the storage type, and every
//! operation returns a fresh tensor.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::linalg::{gemm, Mat, Patches};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Validates dimensions, length and finiteness.
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::shape(format!("tensor dimensions must be positive, got {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(format!(
                "tensor {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Trusted constructor for results of operations on valid tensors.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Tensor { shape, data }
    }

    pub fn full(shape: Shape, value: T) -> Result<Self> {
        Tensor::new(shape, vec![value; shape.len()])
    }

    pub fn zeros(shape: Shape) -> Result<Self> {
        Tensor::full(shape, T::zero())
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// One `h × w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn sample_data(&self, n: usize) -> &[T] {
        let s = self.shape.sample_len();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample(&self, n: usize) -> Tensor<T> {
        Tensor::from_parts(
            Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            self.sample_data(n).to_vec(),
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        Tensor::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape,
            self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Concatenates along the batch axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?
            .shape;
        let mut data = Vec::with_capacity(first.sample_len() * parts.len());
        let mut n = 0;
        for (i, p) in parts.iter().enumerate() {
            let s = p.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::shape(format!(
                    "stack: part {i} has shape {s}, expected (_, {}, {}, {})",
                    first.c, first.h, first.w
                )));
            }
            data.extend_from_slice(&p.data);
            n += s.n;
        }
        Ok(Tensor::from_parts(Shape::new(n, first.c, first.h, first.w), data))
    }
}

/// Cross-correlation of `input` with `kernel` (no flip, no bias, zero padding).
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Kernel<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if kernel.in_c() != s.c {
        return Err(Error::config(format!(
            "conv2d: kernel expects {} input channels, input has {}",
            kernel.in_c(),
            s.c
        )));
    }
    if stride == 0 {
        return Err(Error::config("conv2d: stride must be positive"));
    }
    let patches = Patches::new(s.c, s.h, s.w, kernel.kh(), kernel.kw(), stride, padding).ok_or_else(|| {
        Error::shape(format!(
            "conv2d: kernel {}x{} larger than padded input {}x{}",
            kernel.kh(),
            kernel.kw(),
            s.h + 2 * padding,
            s.w + 2 * padding
        ))
    })?;
    let weights: Vec<f64> = kernel.weights().iter().map(|w| w.as_f64()).collect();
    let out_c = kernel.out_c();
    let (rows, cols) = (patches.rows(), patches.cols());
    let mut col_buf = vec![0.0; rows * cols];
    let mut acc = vec![0.0; out_c * cols];
    let mut data = Vec::with_capacity(s.n * out_c * cols);
    for n in 0..s.n {
        let x = input.sample_data(n);
        if patches.is_pointwise() {
            for (d, v) in col_buf.iter_mut().zip(x) {
                *d = v.as_f64();
            }
        } else {
            patches.im2col(x, T::as_f64, &mut col_buf);
        }
        gemm(
            Mat::new(&weights, out_c, rows),
            Mat::new(&col_buf, rows, cols),
            0.0,
            &mut acc,
        );
        data.extend(acc.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Ok(Tensor::from_parts(Shape::new(s.n, out_c, patches.oh, patches.ow), data))
}

/// Applies each of `m` single-channel `kh × kw` filters to every input
/// channel independently (stride 1, no padding). Output channel
/// `i * m + d` is filter `d` on input channel `i`.
///
/// With `zero_sum` set, every tap is accumulated relative to the window
/// centre, `Σ w_k (x_k − x_centre)`; for filters whose weights sum to zero
/// this equals the plain correlation and sends constant regions to exactly
/// zero.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    filters: &[T],
    kh: usize,
    kw: usize,
    zero_sum: bool,
) -> Result<Tensor<T>> {
    if kh == 0 || kw == 0 || filters.is_empty() || filters.len() % (kh * kw) != 0 {
        return Err(Error::shape(format!(
            "depthwise filter bank of {} weights is not a whole number of {kh}x{kw} filters",
            filters.len()
        )));
    }
    if zero_sum && (kh % 2 == 0 || kw % 2 == 0) {
        return Err(Error::config("centre-referenced filtering needs odd filter sizes"));
    }
    let s = input.shape();
    if kh > s.h || kw > s.w {
        return Err(Error::shape(format!(
            "depthwise filter {kh}x{kw} larger than input {}x{}",
            s.h, s.w
        )));
    }
    let m = filters.len() / (kh * kw);
    let (oh, ow) = (s.h - kh + 1, s.w - kw + 1);
    let taps: Vec<f64> = filters.iter().map(|w| w.as_f64()).collect();
    let mut data = Vec::with_capacity(s.n * s.c * m * oh * ow);
    let (cy, cx) = (kh / 2, kw / 2);
    let mut plane64 = vec![0.0; s.h * s.w];
    for n in 0..s.n {
        for c in 0..s.c {
            for (d, v) in plane64.iter_mut().zip(input.plane(n, c)) {
                *d = v.as_f64();
            }
            for f in taps.chunks_exact(kh * kw) {
                for y in 0..oh {
                    for x in 0..ow {
                        let reference = if zero_sum { plane64[(y + cy) * s.w + x + cx] } else { 0.0 };
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            let row = &plane64[(y + ky) * s.w + x..(y + ky) * s.w + x + kw];
                            for kx in 0..kw {
                                acc += f[ky * kw + kx] * (row[kx] - reference);
                            }
                        }
                        data.push(T::from_f64_lossy(acc));
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(s.n, s.c * m, oh, ow), data))
}

/// Border padding by edge replication.
pub fn pad_replicate<T: Scalar>(input: &Tensor<T>, pad_h: usize, pad_w: usize) -> Tensor<T> {
    if pad_h == 0 && pad_w == 0 {
        return input.clone();
    }
    let s = input.shape();
    let (ph, pw) = (s.h + 2 * pad_h, s.w + 2 * pad_w);
    let mut data = Vec::with_capacity(s.n * s.c * ph * pw);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for y in 0..ph {
                let sy = y.saturating_sub(pad_h).min(s.h - 1);
                let row = &plane[sy * s.w..(sy + 1) * s.w];
                for x in 0..pw {
                    data.push(row[x.saturating_sub(pad_w).min(s.w - 1)]);
                }
            }
        }
    }
    Tensor::from_parts(Shape::new(s.n, s.c, ph, pw), data)
}

/// Mean over each `k × k` window, windows spaced `stride` apart.
pub fn avg_pool2d<T: Scalar>(input: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if k == 0 || stride == 0 {
        return Err(Error::config("avg_pool2d: window and stride must be positive"));
    }
    if k > s.h || k > s.w {
        return Err(Error::shape(format!(
            "avg_pool2d: window {k} larger than input {}x{}",
            s.h, s.w
        )));
    }
    let (oh, ow) = ((s.h - k) / stride + 1, (s.w - k) / stride + 1);
    let inv = 1.0 / (k * k) as f64;
    let mut data = Vec::with_capacity(s.n * s.c * oh * ow);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for y in 0..oh {
                for x in 0..ow {
                    // Deviations from the first element: a constant window
                    // yields that constant exactly.
                    let reference = plane[y * stride * s.w + x * stride].as_f64();
                    let (mut acc, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
                    for ky in 0..k {
                        let row = &plane[(y * stride + ky) * s.w + x * stride..][..k];
                        for v in row {
                            let v = v.as_f64();
                            acc += v - reference;
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    data.push(T::from_f64_lossy((reference + acc * inv).clamp(lo, hi)));
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(s.n, s.c, oh, ow), data))
}

/// Concatenates along the channel axis, in argument order.
pub fn concat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat_channels: no parts"))?
        .shape();
    for (i, p) in parts.iter().enumerate() {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!(
                "concat_channels: part {i} has shape {s}, expected ({}, _, {}, {})",
                first.n, first.h, first.w
            )));
        }
    }
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let mut data = Vec::with_capacity(first.n * c * first.plane());
    for n in 0..first.n {
        for p in parts {
            data.extend_from_slice(p.sample_data(n));
        }
    }
    Ok(Tensor::from_parts(Shape::new(first.n, c, first.h, first.w), data))
}

/// Inverse of [`concat_channels`]: splits into parts of the given channel counts.
pub fn split_channels<T: Scalar>(input: &Tensor<T>, counts: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = input.shape();
    if counts.iter().sum::<usize>() != s.c || counts.contains(&0) {
        return Err(Error::shape(format!(
            "split_channels: counts {counts:?} do not partition {} channels",
            s.c
        )));
    }
    let mut out = Vec::with_capacity(counts.len());
    let mut offset = 0;
    for &c in counts {
        let mut data = Vec::with_capacity(s.n * c * s.plane());
        for n in 0..s.n {
            let start = (n * s.c + offset) * s.plane();
            data.extend_from_slice(&input.data()[start..start + c * s.plane()]);
        }
        out.push(Tensor::from_parts(Shape::new(s.n, c, s.h, s.w), data));
        offset += c;
    }
    Ok(out)
}
