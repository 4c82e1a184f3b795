//! Mini-batch training with a frozen extractor, prediction, late fusion,
//! and conversion of trained detectors to and from checkpoints.

use std::fmt;
use std::str::FromStr;

use super::adam::{adam_step, OptimizerState};
use super::loss::{cross_entropy, softmax2};
use super::model::{backward, forward, ForwardCache, ModelParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::io::manifest::DatasetManifest;
use crate::io::pnm::{quantize, read_image_file};
use crate::operators::{split_top_level, Extractor, Factored, OperatorSpec};
use crate::rng::Stream;
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Single,
    Early,
    Late,
    Cascade,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Single => "single",
            FusionMode::Early => "early",
            FusionMode::Late => "late",
            FusionMode::Cascade => "cascade",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(FusionMode::Single),
            "early" => Ok(FusionMode::Early),
            "late" => Ok(FusionMode::Late),
            "cascade" => Ok(FusionMode::Cascade),
            _ => Err(Error::config(format!(
                "unknown fusion mode `{s}` (expected single, early, late or cascade)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub decay_interval: usize,
    pub decay_factor: f64,
    pub seed: u64,
    pub operators: Vec<OperatorSpec>,
    pub fusion: FusionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            base_lr: 2e-4,
            decay_interval: 10,
            decay_factor: 0.9,
            seed: 0,
            operators: vec![OperatorSpec::Identity],
            fusion: FusionMode::Single,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.decay_interval == 0 {
            return Err(Error::config("decay_interval must be at least 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config(format!("decay_factor {} is outside (0, 1]", self.decay_factor)));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::config(format!("base_lr {} must be finite and non-negative", self.base_lr)));
        }
        if self.operators.is_empty() {
            return Err(Error::config("at least one operator is required"));
        }
        if self.fusion == FusionMode::Single && self.operators.len() != 1 {
            return Err(Error::config(format!(
                "fusion `single` takes one operator, got {}",
                self.operators.len()
            )));
        }
        self.operators.iter().try_for_each(OperatorSpec::validate)
    }

    /// One extractor per classifier to train: several only for late fusion.
    pub fn extractors(&self) -> Result<Vec<Extractor>> {
        self.validate()?;
        Ok(match self.fusion {
            FusionMode::Single => vec![Extractor::single(&self.operators[0])?],
            FusionMode::Early => vec![Extractor::early(&self.operators)?],
            FusionMode::Cascade => vec![Extractor::single(&OperatorSpec::Cascade(self.operators.clone()))?],
            FusionMode::Late => self.operators.iter().map(Extractor::single).collect::<Result<_>>()?,
        })
    }
}

/// `base_lr · decay_factor^floor(epoch / decay_interval)`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    config.base_lr * config.decay_factor.powi((epoch / config.decay_interval) as i32)
}

/// Decoded images of one size kept as bytes, with labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageSet {
    pub h: usize,
    pub w: usize,
    /// `3·h·w` bytes per image, planar RGB.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let mut set = ImageSet {
            h: 0,
            w: 0,
            pixels: Vec::new(),
            labels: Vec::with_capacity(manifest.len()),
        };
        for r in &manifest.records {
            let t = read_image_file(&manifest.image_path(r))?.to_tensor();
            let s = t.shape();
            if set.labels.is_empty() {
                (set.h, set.w) = (s.h, s.w);
            } else if (s.h, s.w) != (set.h, set.w) {
                return Err(Error::shape(format!(
                    "{}: image is {}x{}, expected {}x{} like the rest of the manifest",
                    r.path, s.w, s.h, set.w, set.h
                )));
            }
            set.pixels.extend(t.data().iter().map(|v| (v * 255.0).round() as u8));
            set.labels.push(r.label);
        }
        Ok(set)
    }

    /// Appends a `(1, 3, h, w)` image, quantized as when written to disk.
    pub fn push(&mut self, image: &Tensor, label: u8) -> Result<()> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::shape(format!("expected a (1, 3, h, w) image, got {s}")));
        }
        if self.is_empty() {
            (self.h, self.w) = (s.h, s.w);
        } else if (s.h, s.w) != (self.h, self.w) {
            return Err(Error::shape(format!("image is {}x{}, expected {}x{}", s.w, s.h, self.w, self.h)));
        }
        self.pixels.extend(image.data().iter().map(|&v| quantize(v)));
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(k, 3, h, w)` tensor of the given images, values `v / 255`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let len = 3 * self.h * self.w;
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend(self.pixels[i * len..(i + 1) * len].iter().map(|&b| b as f64 / 255.0));
        }
        Tensor::from_parts(Shape::new(indices.len(), 3, self.h, self.w), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Loss of the very first mini-batch, before any update.
    pub first_batch_loss: f64,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tlr\tloss\ttrain_acc\n");
        for e in &self.epochs {
            s.push_str(&format!("{}\t{:e}\t{:.6}\t{:.4}\n", e.epoch, e.lr, e.loss, e.train_acc));
        }
        s
    }
}

/// Head acting on the narrow maps of a factored extractor: conv1 absorbs the
/// channel mix, `W'[o, j] = Σ_c W[o, c] · mix[c, j]` per tap.
fn fold(params: &ModelParams, f: &Factored) -> ModelParams {
    let (c, s) = (f.out_channels(), f.spatial_channels());
    let taps = params.conv1_w.len() / (c * params.conv1_b.len());
    let mut p = ModelParams::zeros(s);
    p.conv1_b.clone_from(&params.conv1_b);
    p.conv2_w.clone_from(&params.conv2_w);
    p.conv2_b.clone_from(&params.conv2_b);
    p.fc_w.clone_from(&params.fc_w);
    p.fc_b.clone_from(&params.fc_b);
    for o in 0..params.conv1_b.len() {
        for ci in 0..c {
            let src = &params.conv1_w[(o * c + ci) * taps..(o * c + ci + 1) * taps];
            for j in 0..s {
                let m = f.mix()[ci * s + j];
                if m == 0.0 {
                    continue;
                }
                let dst = &mut p.conv1_w[(o * s + j) * taps..(o * s + j + 1) * taps];
                for (d, w) in dst.iter_mut().zip(src) {
                    *d += w * m;
                }
            }
        }
    }
    p
}

/// Pulls gradients of the folded head back to the full-width parameters.
fn unfold_grad(mut g: ModelParams, f: &Factored) -> ModelParams {
    let (c, s) = (f.out_channels(), f.spatial_channels());
    let taps = g.conv1_w.len() / (s * g.conv1_b.len());
    let mut w = vec![0.0; g.conv1_b.len() * c * taps];
    for o in 0..g.conv1_b.len() {
        for ci in 0..c {
            let dst = &mut w[(o * c + ci) * taps..(o * c + ci + 1) * taps];
            for j in 0..s {
                let m = f.mix()[ci * s + j];
                if m == 0.0 {
                    continue;
                }
                let src = &g.conv1_w[(o * s + j) * taps..(o * s + j + 1) * taps];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += v * m;
                }
            }
        }
    }
    let mut full = ModelParams::zeros(c);
    full.conv1_w = w;
    std::mem::swap(&mut full.conv1_b, &mut g.conv1_b);
    std::mem::swap(&mut full.conv2_w, &mut g.conv2_w);
    std::mem::swap(&mut full.conv2_b, &mut g.conv2_b);
    std::mem::swap(&mut full.fc_w, &mut g.fc_w);
    std::mem::swap(&mut full.fc_b, &mut g.fc_b);
    full
}

/// Runs the head on an RGB batch through the factored extractor. Returns
/// the folded parameters so `forward`'s cache can be used with them.
fn head_forward(params: &ModelParams, f: &Factored, batch: &Tensor) -> Result<(ModelParams, Tensor)> {
    if params.c_in() != f.out_channels() {
        return Err(Error::config(format!(
            "classifier expects {} feature channels, extractor yields {}",
            params.c_in(),
            f.out_channels()
        )));
    }
    Ok((fold(params, f), f.spatial(batch)?))
}

/// Trains one head on `extractor` features; the extractor is never modified.
pub fn train(config: &TrainConfig, extractor: &Extractor, manifest: &DatasetManifest) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if manifest.is_empty() {
        return Err(Error::config("training manifest is empty"));
    }
    train_images(config, extractor, &ImageSet::load(manifest)?)
}

pub fn train_images(config: &TrainConfig, extractor: &Extractor, images: &ImageSet) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    let positives = images.labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == images.len() {
        return Err(Error::config("training data must contain both real and fake images"));
    }
    let factored = extractor.factor()?;
    let mut params = ModelParams::init(factored.out_channels(), config.seed);
    let mut opt = OptimizerState::new(&params, config.base_lr);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        opt.lr = lr_at(config, epoch);
        Stream::derive(config.seed, "shuffle", epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let (folded, narrow) = head_forward(&params, &factored, &images.batch(idx))?;
            let labels: Vec<u8> = idx.iter().map(|&i| images.labels[i]).collect();
            let (logits, cache) = forward(&folded, &narrow)?;
            let (loss, dlogits) = cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            if epoch == 0 && b == 0 {
                log.first_batch_loss = loss;
            }
            loss_sum += loss * idx.len() as f64;
            correct += logits
                .iter()
                .zip(&labels)
                .filter(|(l, &y)| (softmax2(**l)[1] >= 0.5) == (y == 1))
                .count();
            let grads = unfold_grad(backward(&folded, &cache, &dlogits), &factored);
            adam_step(&mut opt, &mut params, &grads);
        }
        log.epochs.push(EpochLog {
            epoch,
            lr: opt.lr,
            loss: loss_sum / images.len() as f64,
            train_acc: correct as f64 / images.len() as f64,
        });
    }
    Ok((params, log))
}

/// Fake-class probability of each sample.
pub fn predict(params: &ModelParams, extractor: &Extractor, batch: &Tensor) -> Result<Vec<f64>> {
    let (folded, narrow) = head_forward(params, &extractor.factor()?, batch)?;
    let (logits, _) = forward(&folded, &narrow)?;
    Ok(logits.into_iter().map(|l| softmax2(l)[1]).collect())
}

/// Mean of each model's fake probability.
pub fn late_fuse_predict(models: &[(ModelParams, Extractor)], batch: &Tensor) -> Result<Vec<f64>> {
    if models.is_empty() {
        return Err(Error::config("late fusion needs at least one model"));
    }
    let mut sum = vec![0.0; batch.shape().n];
    for (params, extractor) in models {
        for (s, p) in sum.iter_mut().zip(predict(params, extractor, batch)?) {
            *s += p;
        }
    }
    Ok(sum.into_iter().map(|s| s / models.len() as f64).collect())
}

/// Trained heads with their extractors; more than one means late fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub fusion: FusionMode,
    pub models: Vec<(ModelParams, Extractor)>,
}

/// Images per forward pass at inference.
const EVAL_CHUNK: usize = 64;

impl Detector {
    /// Trains every head the fusion mode calls for. Parameters are kept at
    /// checkpoint precision so in-memory and reloaded detectors agree.
    pub fn train(config: &TrainConfig, images: &ImageSet) -> Result<(Self, Vec<TrainLog>)> {
        let mut models = Vec::new();
        let mut logs = Vec::new();
        for extractor in config.extractors()? {
            let (params, log) = train_images(config, &extractor, images)?;
            models.push((params.rounded_to_f32(), extractor));
            logs.push(log);
        }
        Ok((
            Detector {
                fusion: config.fusion,
                models,
            },
            logs,
        ))
    }

    /// Row label for result tables: the extractor, or `late(a|b)`.
    pub fn name(&self) -> String {
        match self.fusion {
            FusionMode::Late => format!(
                "late({})",
                self.models.iter().map(|(_, e)| e.to_string()).collect::<Vec<_>>().join("|")
            ),
            _ => self.models.iter().map(|(_, e)| e.to_string()).collect::<Vec<_>>().join(";"),
        }
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<f64>> {
        late_fuse_predict(&self.models, batch)
    }

    pub fn predict_images(&self, images: &ImageSet) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..images.len()).collect();
        let mut out = Vec::with_capacity(images.len());
        for idx in all.chunks(EVAL_CHUNK) {
            out.extend(self.predict(&images.batch(idx))?);
        }
        Ok(out)
    }

    /// Post-pool feature vectors of every head, concatenated per image.
    pub fn embed_images(&self, images: &ImageSet) -> Result<Vec<Vec<f64>>> {
        let all: Vec<usize> = (0..images.len()).collect();
        let mut out = vec![Vec::new(); images.len()];
        for idx in all.chunks(EVAL_CHUNK) {
            let batch = images.batch(idx);
            for (params, extractor) in &self.models {
                let (folded, narrow) = head_forward(params, &extractor.factor()?, &batch)?;
                let (_, cache): (_, ForwardCache) = forward(&folded, &narrow)?;
                for (k, &i) in idx.iter().enumerate() {
                    let d = cache.pooled.len() / idx.len();
                    out[i].extend_from_slice(&cache.pooled[k * d..(k + 1) * d]);
                }
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::default();
        ck.push_meta("format", CHECKPOINT_FORMAT);
        ck.push_meta("fusion", self.fusion);
        ck.push_meta("seed", config.seed);
        ck.push_meta("epochs", config.epochs);
        ck.push_meta("batch_size", config.batch_size);
        ck.push_meta("base_lr", format!("{:?}", config.base_lr));
        ck.push_meta("decay_interval", config.decay_interval);
        ck.push_meta("decay_factor", format!("{:?}", config.decay_factor));
        ck.push_meta(
            "operators",
            config.operators.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(";"),
        );
        ck.push_meta("models", self.models.len());
        for (i, (params, extractor)) in self.models.iter().enumerate() {
            ck.push_meta(format!("model.{i}.extractor"), extractor);
            ck.push_meta(format!("model.{i}.c_dio"), params.c_in());
            for ((name, shape), values) in PARAM_NAMES.iter().zip(params.shapes()).zip(params.slices()) {
                let t = Tensor::new(shape, values.iter().map(|&v| v as f32).collect())?;
                ck.tensors.push((format!("model.{i}.{name}"), t));
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let format = ck.require_meta("format")?;
        if format != CHECKPOINT_FORMAT.to_string() {
            return Err(Error::config(format!("checkpoint payload format {format} is not supported")));
        }
        let fusion: FusionMode = ck.require_meta("fusion")?.parse()?;
        let count: usize = parse_meta(ck, "models")?;
        if count == 0 || (fusion != FusionMode::Late && count != 1) {
            return Err(Error::config(format!("fusion `{fusion}` cannot hold {count} models")));
        }
        let mut models = Vec::with_capacity(count);
        for i in 0..count {
            let extractor = Extractor::parse(ck.require_meta(&format!("model.{i}.extractor"))?)?;
            let c_in: usize = parse_meta(ck, &format!("model.{i}.c_dio"))?;
            if extractor.out_channels()? != c_in {
                return Err(Error::config(format!(
                    "model {i}: extractor yields {} channels, checkpoint says {c_in}",
                    extractor.out_channels()?
                )));
            }
            let mut parts: [Vec<f64>; 6] = Default::default();
            for (part, name) in parts.iter_mut().zip(PARAM_NAMES) {
                let key = format!("model.{i}.{name}");
                let t = ck
                    .tensor(&key)
                    .ok_or_else(|| Error::config(format!("checkpoint is missing tensor `{key}`")))?;
                *part = t.data().iter().map(|&v| v as f64).collect();
            }
            models.push((ModelParams::from_slices(c_in, parts)?, extractor));
        }
        Ok(Detector { fusion, models })
    }
}

/// Operator list as written in configs and checkpoint metadata: `;`-separated.
pub fn parse_operator_list(s: &str) -> Result<Vec<OperatorSpec>> {
    split_top_level(s, ';')?.into_iter().map(|p| p.trim().parse()).collect()
}

fn parse_meta<T: FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    let v = ck.require_meta(key)?;
    v.parse()
        .map_err(|_| Error::config(format!("checkpoint metadata `{key}` has invalid value `{v}`")))
}
