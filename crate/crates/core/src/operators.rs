//! Data-independent operators: fixed filter banks applied to images before
//! the classifier, and their compositions.
//!
//! An [`OperatorSpec`] is the declarative form (and has a compact string
//! syntax, e.g. `cascade(random:seed=88,out=64,k=1|sobel)`); an
//! [`Operator`] is the materialized, immutable sequence of filter stages.
//!
//! Conv stages run at stride 1 with edge-replicated borders of half the
//! kernel size, so spatial dimensions are preserved and constant images stay
//! constant at the border. Handcrafted kernels are applied depthwise: each
//! matrix is run over every incoming channel independently, which lets them
//! follow a stage of any width inside a cascade.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::ntf;
use crate::kernel::{Kernel, Provenance};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::{avg_pool2d, concat_channels, conv2d, depthwise_conv2d, pad_replicate, Shape, Tensor};

/// Channels of an RGB image, the input every top-level operator expects.
pub const IMAGE_CHANNELS: usize = 3;

/// Deepest permitted nesting of `cascade(...)`.
pub const MAX_CASCADE_DEPTH: usize = 8;

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

/// Builds a depthwise bank over `in_c` channels: output channel `i * m + d`
/// applies `filters[d]` to input channel `i` and ignores the rest.
fn depthwise_bank<T: Scalar>(filters: &[Vec<T>], k: usize, in_c: usize, provenance: Provenance) -> Kernel<T> {
    let m = filters.len();
    let mut w = vec![T::zero(); in_c * m * in_c * k * k];
    for i in 0..in_c {
        for (d, f) in filters.iter().enumerate() {
            let o = i * m + d;
            let start = (o * in_c + i) * k * k;
            w[start..start + k * k].copy_from_slice(f);
        }
    }
    Kernel::new(in_c * m, in_c, k, k, w, provenance).expect("depthwise bank dimensions are consistent")
}

fn to_scalar<T: Scalar>(values: &[f64]) -> Vec<T> {
    values.iter().map(|&v| T::from_f64_lossy(v)).collect()
}

/// Horizontal and vertical Sobel over RGB: `(6, 3, 3, 3)`.
pub fn make_sobel<T: Scalar>() -> Kernel<T> {
    depthwise_bank(
        &[to_scalar(&SOBEL_X), to_scalar(&SOBEL_Y)],
        3,
        IMAGE_CHANNELS,
        Provenance::Handcrafted("sobel".into()),
    )
}

/// 4-neighbour Laplacian over RGB: `(3, 3, 3, 3)`.
pub fn make_laplacian<T: Scalar>() -> Kernel<T> {
    depthwise_bank(
        &[to_scalar(&LAPLACIAN)],
        3,
        IMAGE_CHANNELS,
        Provenance::Handcrafted("laplacian".into()),
    )
}

/// The continuous Laplacian-of-Gaussian profile sampled on the integer grid
/// centred at zero, then shifted to zero mean.
pub fn log_matrix(sigma: f64, k: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("log: sigma must be positive, got {sigma}")));
    }
    if k < 3 || k % 2 == 0 {
        return Err(Error::config(format!("log: size must be odd and >= 3, got {k}")));
    }
    let half = (k / 2) as f64;
    let s2 = sigma * sigma;
    let mut m: Vec<f64> = (0..k * k)
        .map(|idx| {
            let y = (idx / k) as f64 - half;
            let x = (idx % k) as f64 - half;
            let r2 = x * x + y * y;
            (r2 - 2.0 * s2) / (s2 * s2) * (-r2 / (2.0 * s2)).exp()
        })
        .collect();
    let mean = m.iter().sum::<f64>() / m.len() as f64;
    m.iter_mut().for_each(|v| *v -= mean);
    Ok(m)
}

pub fn make_log<T: Scalar>(sigma: f64, k: usize) -> Result<Kernel<T>> {
    let m = log_matrix(sigma, k)?;
    Ok(depthwise_bank(
        &[to_scalar(&m)],
        k,
        IMAGE_CHANNELS,
        Provenance::Handcrafted(format!("log(sigma={sigma:?},k={k})")),
    ))
}

/// `x` rounded toward zero to the nearest `f32`.
fn f32_toward_zero(x: f64) -> f32 {
    let f = x as f32;
    if f != 0.0 && (f as f64).abs() > x.abs() {
        f32::from_bits(f.to_bits() - 1)
    } else {
        f
    }
}

/// A `(out_c, 3, k, k)` bank with weights i.i.d. uniform on the open
/// interval `(-b, b)`, `b = 1/sqrt(3·k·k)`.
///
/// The stream is `Stream::new(seed)`; weights are drawn in `o → i → ky → kx`
/// order, one `u64` each: `v = ((bits >> 40) + 0.5)·2⁻²³ − 1`, weight
/// `= v·b` rounded toward zero to `f32`. Values are therefore identical for
/// `f32` and `f64` storage and on every platform.
pub fn make_random_conv<T: Scalar>(seed: u64, out_c: usize, k: usize) -> Result<Kernel<T>> {
    if out_c == 0 {
        return Err(Error::config("random: out must be positive"));
    }
    if k == 0 || k % 2 == 0 {
        return Err(Error::config(format!("random: k must be odd and positive, got {k}")));
    }
    let fan_in = IMAGE_CHANNELS * k * k;
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = Stream::new(seed);
    let weights = (0..out_c * fan_in)
        .map(|_| {
            let v = ((rng.next_u64() >> 40) as f64 + 0.5) * (1.0 / (1u64 << 23) as f64) - 1.0;
            T::from_f64_lossy(f32_toward_zero(v * bound) as f64)
        })
        .collect();
    Kernel::new(out_c, IMAGE_CHANNELS, k, k, weights, Provenance::Random(seed))
}

/// Loads a bank exported as NTF (`n` = out channels, `c` = in channels).
pub fn import_conv<T: Scalar>(path: &Path) -> Result<Kernel<T>> {
    let t = ntf::read_ntf(path)?;
    Kernel::from_tensor(&t.cast::<T>(), Provenance::Imported(path.display().to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorSpec {
    /// Pass-through; the no-operator baseline.
    Identity,
    Sobel,
    Laplacian,
    LoG { sigma: f64, k: usize },
    AvgPool { k: usize, stride: usize },
    RandomConv { seed: u64, out_c: usize, k: usize },
    ImportedConv { path: PathBuf },
    Cascade(Vec<OperatorSpec>),
}

impl OperatorSpec {
    pub fn depth(&self) -> usize {
        match self {
            OperatorSpec::Cascade(children) => 1 + children.iter().map(|c| c.depth()).max().unwrap_or(0),
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OperatorSpec::LoG { sigma, k } => log_matrix(*sigma, *k).map(|_| ()),
            OperatorSpec::AvgPool { k, stride } if *k == 0 || *stride == 0 => {
                Err(Error::config("avgpool: k and stride must be positive"))
            }
            OperatorSpec::RandomConv { out_c, k, .. } if *out_c == 0 || *k % 2 == 0 => Err(Error::config(
                format!("random: need out >= 1 and odd k, got out={out_c}, k={k}"),
            )),
            OperatorSpec::Cascade(children) => {
                if children.is_empty() {
                    return Err(Error::config("cascade must have at least one stage"));
                }
                if self.depth() > MAX_CASCADE_DEPTH {
                    return Err(Error::config(format!(
                        "cascade nesting depth {} exceeds {MAX_CASCADE_DEPTH}",
                        self.depth()
                    )));
                }
                children.iter().try_for_each(|c| c.validate())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for OperatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorSpec::Identity => f.write_str("none"),
            OperatorSpec::Sobel => f.write_str("sobel"),
            OperatorSpec::Laplacian => f.write_str("laplacian"),
            OperatorSpec::LoG { sigma, k } => write!(f, "log:sigma={sigma:?},k={k}"),
            OperatorSpec::AvgPool { k, stride } => write!(f, "avgpool:k={k},stride={stride}"),
            OperatorSpec::RandomConv { seed, out_c, k } => write!(f, "random:seed={seed},out={out_c},k={k}"),
            OperatorSpec::ImportedConv { path } => write!(f, "import:path={}", path.display()),
            OperatorSpec::Cascade(children) => {
                f.write_str("cascade(")?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str("|")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Splits on `sep` at parenthesis depth zero.
pub(crate) fn split_top_level(s: &str, sep: char) -> Result<Vec<&str>> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::config(format!("unbalanced `)` in `{s}`")));
                }
            }
            c if c == sep && depth == 0 => {
                parts.push(&s[start..i]);
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(Error::config(format!("unbalanced `(` in `{s}`")));
    }
    parts.push(&s[start..]);
    Ok(parts)
}

fn parse_params<'a>(kind: &str, body: &'a str, allowed: &[&str]) -> Result<Vec<(&'a str, &'a str)>> {
    let mut out: Vec<(&str, &str)> = Vec::new();
    for item in body.split(',') {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("{kind}: expected key=value, got `{item}`")))?;
        let key = key.trim();
        if !allowed.contains(&key) {
            return Err(Error::config(format!("{kind}: unknown parameter `{key}`")));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::config(format!("{kind}: duplicate parameter `{key}`")));
        }
        out.push((key, value.trim()));
    }
    for key in allowed {
        if !out.iter().any(|(k, _)| k == key) {
            return Err(Error::config(format!("{kind}: missing parameter `{key}`")));
        }
    }
    Ok(out)
}

fn param<T: FromStr>(kind: &str, params: &[(&str, &str)], key: &str) -> Result<T> {
    let raw = params
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .expect("presence checked by parse_params");
    raw.parse()
        .map_err(|_| Error::config(format!("{kind}: invalid value `{raw}` for `{key}`")))
}

impl FromStr for OperatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let spec = if let Some(inner) = s.strip_prefix("cascade(") {
            let inner = inner
                .strip_suffix(')')
                .ok_or_else(|| Error::config(format!("cascade: missing closing `)` in `{s}`")))?;
            if inner.trim().is_empty() {
                return Err(Error::config("cascade must have at least one stage"));
            }
            let children = split_top_level(inner, '|')?
                .into_iter()
                .map(str::parse)
                .collect::<Result<Vec<_>>>()?;
            OperatorSpec::Cascade(children)
        } else {
            let (kind, body) = match s.split_once(':') {
                Some((k, b)) => (k.trim(), Some(b)),
                None => (s, None),
            };
            match (kind, body) {
                ("none", None) => OperatorSpec::Identity,
                ("sobel", None) => OperatorSpec::Sobel,
                ("laplacian", None) => OperatorSpec::Laplacian,
                ("log", Some(b)) => {
                    let p = parse_params(kind, b, &["sigma", "k"])?;
                    OperatorSpec::LoG {
                        sigma: param(kind, &p, "sigma")?,
                        k: param(kind, &p, "k")?,
                    }
                }
                ("avgpool", Some(b)) => {
                    let p = parse_params(kind, b, &["k", "stride"])?;
                    OperatorSpec::AvgPool {
                        k: param(kind, &p, "k")?,
                        stride: param(kind, &p, "stride")?,
                    }
                }
                ("random", Some(b)) => {
                    let p = parse_params(kind, b, &["seed", "out", "k"])?;
                    OperatorSpec::RandomConv {
                        seed: param(kind, &p, "seed")?,
                        out_c: param(kind, &p, "out")?,
                        k: param(kind, &p, "k")?,
                    }
                }
                ("import", Some(b)) => {
                    // The path is everything after `path=`, commas included.
                    let path = b
                        .strip_prefix("path=")
                        .ok_or_else(|| Error::config(format!("import: expected `path=...`, got `{b}`")))?;
                    if path.is_empty() {
                        return Err(Error::config("import: empty path"));
                    }
                    OperatorSpec::ImportedConv { path: PathBuf::from(path) }
                }
                _ => return Err(Error::config(format!("unknown operator `{s}`"))),
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One materialized filtering step.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage<T: Scalar = f64> {
    /// Full channel-mixing bank; stride 1, replicated borders.
    Conv { kernel: Kernel<T> },
    /// Channel-agnostic handcrafted matrices applied to every channel.
    Depthwise {
        /// The RGB form of the bank, as returned by `make_*`.
        kernel: Kernel<T>,
        /// `m` stacked `k × k` matrices.
        filters: Vec<T>,
        k: usize,
        zero_sum: bool,
    },
    Pool { k: usize, stride: usize },
}

impl<T: Scalar> Stage<T> {
    fn from_handcrafted(kernel: Kernel<T>, m: usize, zero_sum: bool) -> Self {
        let k = kernel.kh();
        // Matrices live on the diagonal of input channel 0.
        let filters = (0..m).flat_map(|d| kernel.slice(d, 0).to_vec()).collect();
        Stage::Depthwise {
            kernel,
            filters,
            k,
            zero_sum,
        }
    }

    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Stage::Conv { kernel } => {
                if kernel.in_c() != input.c {
                    return Err(Error::config(format!(
                        "bank expects {} input channels, got {}",
                        kernel.in_c(),
                        input.c
                    )));
                }
                Ok(Shape { c: kernel.out_c(), ..input })
            }
            Stage::Depthwise { filters, k, .. } => Ok(Shape {
                c: input.c * filters.len() / (k * k),
                ..input
            }),
            Stage::Pool { k, stride } => {
                if *k > input.h || *k > input.w {
                    return Err(Error::shape(format!(
                        "pool window {k} larger than {}x{}",
                        input.h, input.w
                    )));
                }
                Ok(Shape {
                    h: (input.h - k) / stride + 1,
                    w: (input.w - k) / stride + 1,
                    ..input
                })
            }
        }
    }

    pub fn run(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Stage::Conv { kernel } => {
                let padded = pad_replicate(x, kernel.kh() / 2, kernel.kw() / 2);
                conv2d(&padded, kernel, 1, 0)
            }
            Stage::Depthwise {
                filters, k, zero_sum, ..
            } => depthwise_conv2d(&pad_replicate(x, k / 2, k / 2), filters, *k, *k, *zero_sum),
            Stage::Pool { k, stride } => avg_pool2d(x, *k, *stride),
        }
    }

    /// The full bank this stage applies to an `in_c`-channel input.
    pub fn expanded_kernel(&self, in_c: usize) -> Option<Kernel<T>> {
        match self {
            Stage::Conv { kernel } => Some(kernel.clone()),
            Stage::Depthwise {
                kernel, filters, k, ..
            } => {
                let mats: Vec<Vec<T>> = filters.chunks_exact(k * k).map(|f| f.to_vec()).collect();
                Some(depthwise_bank(&mats, *k, in_c, kernel.provenance().clone()))
            }
            Stage::Pool { .. } => None,
        }
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        let mut weights = |tag: &str, dims: &[usize], w: &[T]| {
            out.extend_from_slice(tag.as_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in w {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        };
        match self {
            Stage::Conv { kernel } => weights(
                "conv",
                &[kernel.out_c(), kernel.in_c(), kernel.kh(), kernel.kw()],
                kernel.weights(),
            ),
            Stage::Depthwise {
                kernel,
                filters,
                k,
                zero_sum,
            } => {
                weights("dwbank", &[kernel.out_c(), kernel.in_c(), *k], kernel.weights());
                weights("dw", &[*k, *zero_sum as usize], filters);
            }
            Stage::Pool { k, stride } => weights("pool", &[*k, *stride], &[]),
        }
    }
}

/// A materialized, immutable operator.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator<T: Scalar = f64> {
    spec: OperatorSpec,
    stages: Vec<Stage<T>>,
}

fn materialize<T: Scalar>(spec: &OperatorSpec, stages: &mut Vec<Stage<T>>) -> Result<()> {
    match spec {
        OperatorSpec::Identity => {}
        OperatorSpec::Sobel => stages.push(Stage::from_handcrafted(make_sobel(), 2, true)),
        OperatorSpec::Laplacian => stages.push(Stage::from_handcrafted(make_laplacian(), 1, true)),
        OperatorSpec::LoG { sigma, k } => stages.push(Stage::from_handcrafted(make_log(*sigma, *k)?, 1, true)),
        OperatorSpec::AvgPool { k, stride } => stages.push(Stage::Pool { k: *k, stride: *stride }),
        OperatorSpec::RandomConv { seed, out_c, k } => stages.push(Stage::Conv {
            kernel: make_random_conv(*seed, *out_c, *k)?,
        }),
        OperatorSpec::ImportedConv { path } => {
            let kernel = import_conv(path)?;
            if kernel.kh() % 2 == 0 || kernel.kw() % 2 == 0 {
                return Err(Error::config(format!(
                    "{}: imported kernels must have odd spatial size, got {}x{}",
                    path.display(),
                    kernel.kh(),
                    kernel.kw()
                )));
            }
            stages.push(Stage::Conv { kernel });
        }
        OperatorSpec::Cascade(children) => {
            for c in children {
                materialize(c, stages)?;
            }
        }
    }
    Ok(())
}

/// Materializes every kernel of `spec` and checks the channel chain for
/// RGB input.
pub fn build_operator<T: Scalar>(spec: &OperatorSpec) -> Result<Operator<T>> {
    spec.validate()?;
    let mut stages = Vec::new();
    materialize(spec, &mut stages)?;
    let mut c = IMAGE_CHANNELS;
    for (i, st) in stages.iter().enumerate() {
        if let Stage::Conv { kernel } = st {
            if kernel.in_c() != c {
                return Err(Error::config(format!(
                    "operator `{spec}`: stage {i} expects {} input channels but receives {c}",
                    kernel.in_c()
                )));
            }
        }
        c = st.out_shape(Shape::new(1, c, usize::MAX / 4, usize::MAX / 4))?.c;
    }
    Ok(Operator {
        spec: spec.clone(),
        stages,
    })
}

impl<T: Scalar> Operator<T> {
    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[Stage<T>] {
        &self.stages
    }

    pub fn out_channels(&self, in_channels: usize) -> Result<usize> {
        let mut c = in_channels;
        for (i, st) in self.stages.iter().enumerate() {
            c = st
                .out_shape(Shape::new(1, c, usize::MAX / 4, usize::MAX / 4))
                .map_err(|e| Error::config(format!("stage {i}: {e}")))?
                .c;
        }
        Ok(c)
    }

    pub fn out_shape(&self, input: Shape) -> Result<Shape> {
        self.stages.iter().try_fold(input, |s, st| st.out_shape(s))
    }

    /// Runs the stages on a batch of any channel count the chain accepts.
    pub fn apply_any(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut stages = self.stages.iter();
        let Some(first) = stages.next() else {
            return Ok(batch.clone());
        };
        let mut x = first.run(batch)?;
        for st in stages {
            x = st.run(&x)?;
        }
        Ok(x)
    }

    /// Extracts the artifact representation of an RGB batch.
    pub fn apply(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        if batch.shape().c != IMAGE_CHANNELS {
            return Err(Error::config(format!(
                "operator `{}` expects {IMAGE_CHANNELS}-channel images, got {}",
                self.spec,
                batch.shape().c
            )));
        }
        self.apply_any(batch)
    }

    /// Canonical byte encoding of the spec and every materialized weight.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.spec.to_string().into_bytes();
        out.push(0);
        for st in &self.stages {
            st.write_bytes(&mut out);
        }
        out
    }
}

/// Channel-concatenates the outputs of several operators on one batch.
pub fn early_fuse<T: Scalar>(ops: &[Operator<T>], batch: &Tensor<T>) -> Result<Tensor<T>> {
    if ops.is_empty() {
        return Err(Error::config("early fusion needs at least one operator"));
    }
    let outputs = ops.iter().map(|op| op.apply(batch)).collect::<Result<Vec<_>>>()?;
    let s0 = outputs[0].shape();
    for (i, o) in outputs.iter().enumerate() {
        if (o.shape().h, o.shape().w) != (s0.h, s0.w) {
            return Err(Error::shape(format!(
                "early fusion: operator {i} (`{}`) produces {}x{}, operator 0 produces {}x{}",
                ops[i].spec(),
                o.shape().h,
                o.shape().w,
                s0.h,
                s0.w
            )));
        }
    }
    concat_channels(&outputs)
}

/// What the classifier sees: one operator, or several fused early.
#[derive(Clone, Debug, PartialEq)]
pub enum Extractor<T: Scalar = f64> {
    Single(Operator<T>),
    Early(Vec<Operator<T>>),
}

impl<T: Scalar> Extractor<T> {
    pub fn single(spec: &OperatorSpec) -> Result<Self> {
        Ok(Extractor::Single(build_operator(spec)?))
    }

    pub fn early(specs: &[OperatorSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("early fusion needs at least one operator"));
        }
        Ok(Extractor::Early(specs.iter().map(build_operator).collect::<Result<_>>()?))
    }

    /// `early(a|b)` for early fusion, otherwise the operator spec string.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("early(").and_then(|r| r.strip_suffix(')')) {
            let specs = split_top_level(inner, '|')?
                .into_iter()
                .map(str::parse)
                .collect::<Result<Vec<OperatorSpec>>>()?;
            Extractor::early(&specs)
        } else {
            Extractor::single(&s.parse()?)
        }
    }

    pub fn extract(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Extractor::Single(op) => op.apply(batch),
            Extractor::Early(ops) => early_fuse(ops, batch),
        }
    }

    pub fn out_channels(&self) -> Result<usize> {
        match self {
            Extractor::Single(op) => op.out_channels(IMAGE_CHANNELS),
            Extractor::Early(ops) => ops.iter().map(|op| op.out_channels(IMAGE_CHANNELS)).sum(),
        }
    }

    pub fn factor(&self) -> Result<Factored<T>> {
        match self {
            Extractor::Single(op) => Factored::of_operator(op),
            Extractor::Early(ops) => Ok(Factored::concat(
                ops.iter().map(Factored::of_operator).collect::<Result<_>>()?,
            )),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Extractor::Single(op) => op.to_bytes(),
            Extractor::Early(ops) => ops.iter().flat_map(|op| op.to_bytes()).collect(),
        }
    }
}

/// An extractor rewritten as narrow spatial filtering followed by a
/// per-pixel channel mix: `extract(x) = mix · spatial(x)` up to rounding.
///
/// Every stage is linear and pointwise mixing commutes with replicate
/// padding, depthwise filtering and pooling, so wide random banks can be
/// carried as a matrix instead of as feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Factored<T: Scalar = f64> {
    /// Stage chains applied to the RGB input; their outputs are concatenated.
    branches: Vec<Vec<Stage<T>>>,
    /// `out_channels × spatial_channels`, row-major.
    mix: Vec<f64>,
    out_channels: usize,
    spatial_channels: usize,
}

impl<T: Scalar> Factored<T> {
    fn of_operator(op: &Operator<T>) -> Result<Self> {
        let mut stages = Vec::new();
        let (mut c, mut s) = (IMAGE_CHANNELS, IMAGE_CHANNELS);
        let mut mix = identity(c);
        for st in &op.stages {
            match st {
                Stage::Conv { kernel } => {
                    let (out, taps) = (kernel.out_c(), kernel.kh() * kernel.kw());
                    // K' = K · (mix ⊗ I_taps)
                    let mut folded = vec![0.0; out * s * taps];
                    for o in 0..out {
                        for i in 0..c {
                            let w = kernel.slice(o, i);
                            for j in 0..s {
                                let m = mix[i * s + j];
                                if m == 0.0 {
                                    continue;
                                }
                                let dst = &mut folded[(o * s + j) * taps..(o * s + j + 1) * taps];
                                for (d, v) in dst.iter_mut().zip(w) {
                                    *d += v.as_f64() * m;
                                }
                            }
                        }
                    }
                    if taps == 1 {
                        mix = folded;
                    } else {
                        let k = Kernel::new(
                            out,
                            s,
                            kernel.kh(),
                            kernel.kw(),
                            folded.into_iter().map(T::from_f64_lossy).collect(),
                            kernel.provenance().clone(),
                        )?;
                        stages.push(Stage::Conv { kernel: k });
                        mix = identity(out);
                        s = out;
                    }
                    c = out;
                }
                Stage::Depthwise { filters, k, .. } => {
                    let m = filters.len() / (k * k);
                    let mut wide = vec![0.0; c * m * s * m];
                    for i in 0..c {
                        for j in 0..s {
                            for d in 0..m {
                                wide[(i * m + d) * s * m + j * m + d] = mix[i * s + j];
                            }
                        }
                    }
                    stages.push(st.clone());
                    (mix, c, s) = (wide, c * m, s * m);
                }
                Stage::Pool { .. } => stages.push(st.clone()),
            }
        }
        Ok(Factored {
            branches: vec![stages],
            mix,
            out_channels: c,
            spatial_channels: s,
        })
    }

    fn concat(parts: Vec<Factored<T>>) -> Self {
        let out: usize = parts.iter().map(|p| p.out_channels).sum();
        let s: usize = parts.iter().map(|p| p.spatial_channels).sum();
        let mut mix = vec![0.0; out * s];
        let (mut r0, mut c0) = (0, 0);
        let mut branches = Vec::new();
        for p in parts {
            for r in 0..p.out_channels {
                let src = &p.mix[r * p.spatial_channels..(r + 1) * p.spatial_channels];
                mix[(r0 + r) * s + c0..(r0 + r) * s + c0 + p.spatial_channels].copy_from_slice(src);
            }
            r0 += p.out_channels;
            c0 += p.spatial_channels;
            branches.extend(p.branches);
        }
        Factored {
            branches,
            mix,
            out_channels: out,
            spatial_channels: s,
        }
    }

    pub fn mix(&self) -> &[f64] {
        &self.mix
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn spatial_channels(&self) -> usize {
        self.spatial_channels
    }

    /// The narrow `spatial_channels`-wide maps of an RGB batch.
    pub fn spatial(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for stages in &self.branches {
            let mut x = batch.clone();
            for st in stages {
                x = st.run(&x)?;
            }
            outs.push(x);
        }
        if outs.len() == 1 {
            return Ok(outs.pop().unwrap());
        }
        concat_channels(&outs)
    }
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    (0..n).for_each(|i| m[i * n + i] = 1.0);
    m
}

impl<T: Scalar> fmt::Display for Extractor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Extractor::Single(op) => write!(f, "{}", op.spec()),
            Extractor::Early(ops) => {
                f.write_str("early(")?;
                for (i, op) in ops.iter().enumerate() {
                    if i > 0 {
                        f.write_str("|")?;
                    }
                    write!(f, "{}", op.spec())?;
                }
                f.write_str(")")
            }
        }
    }
}
