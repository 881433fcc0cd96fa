//! Datasets, augmentation, the SGD loop and evaluation.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::models::{save_checkpoint, Model, ModelSpec};
use crate::nn::{commit_stat_updates, seeded_rng, ForwardCtx, Mode, Module};
use crate::ops;
use crate::tensor::{Real, Tensor};

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_BATCHES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            batch_size: 64,
            seed: 0,
            schedule: Schedule::Cosine,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Short run for the synthetic blobs: four epochs of batch 32 without
    /// augmentation, since crops and flips move the class-coding textures.
    pub fn blobs() -> Self {
        Self { epochs: 4, batch_size: 32, augment: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(self.base_lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate, momentum and weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.base_lr,
            Schedule::Cosine => cosine_lr(self.base_lr, step, total),
        }
    }
}

/// `base * 0.5 * (1 + cos(pi * t / T))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Standard CIFAR-10 binary batches. A class-balanced subset of
    /// `train_images` trains; `val_per_class` disjoint images per class validate.
    Cifar10Binary { path: PathBuf, train_images: usize, val_per_class: usize },
    /// Gaussian clusters in a low-dimensional latent space, rendered through a
    /// fixed smooth basis into `size x size` RGB images.
    SyntheticGaussianBlobs { classes: usize, train_per_class: usize, val_per_class: usize, size: usize, separation: f64 },
}

impl DatasetSource {
    pub fn cifar(path: impl Into<PathBuf>) -> Self {
        Self::Cifar10Binary { path: path.into(), train_images: 5000, val_per_class: 100 }
    }

    pub fn blobs() -> Self {
        Self::SyntheticGaussianBlobs { classes: 10, train_per_class: 100, val_per_class: 30, size: 32, separation: 3.0 }
    }
}

/// Images on the raw 0-255 scale, `[N, C, H, W]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub channels: usize,
    pub size: usize,
    pub classes: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        ImageSet {
            pixels: indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_empty()
        }
    }

    fn clone_empty(&self) -> ImageSet {
        ImageSet { channels: self.channels, size: self.size, classes: self.classes, pixels: Vec::new(), labels: Vec::new() }
    }
}

/// Per-channel affine normalization with training-set statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn fit(set: &ImageSet) -> Self {
        let (c, hw) = (set.channels, set.size * set.size);
        let mut mean = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for i in 0..set.len() {
            for (ch, plane) in set.image(i).chunks_exact(hw).enumerate() {
                for &v in plane {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let count = (set.len() * hw).max(1) as f64;
        let mean: Vec<f64> = mean.iter().map(|m| m / count).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| ((s / count - m * m).max(0.0).sqrt().max(1e-3)) as f32).collect();
        Self { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    pub fn apply(&self, image: &mut [f32]) {
        let hw = image.len() / self.mean.len();
        for (ch, plane) in image.chunks_exact_mut(hw).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            plane.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: ImageSet,
    pub val: ImageSet,
    pub norm: Normalizer,
}

impl Split {
    pub fn load(source: &DatasetSource, seed: u64) -> Result<Split> {
        let (train, val) = match source {
            DatasetSource::Cifar10Binary { path, train_images, val_per_class } => {
                let all = read_cifar(path)?;
                split_balanced(&all, *train_images / all.classes, *val_per_class, seed)?
            }
            DatasetSource::SyntheticGaussianBlobs { classes, train_per_class, val_per_class, size, separation } => {
                let all = render_blobs(*classes, train_per_class + val_per_class, *size, *separation, seed)?;
                split_balanced(&all, *train_per_class, *val_per_class, seed)?
            }
        };
        let norm = Normalizer::fit(&train);
        Ok(Split { train, val, norm })
    }
}

fn cifar_files(root: &Path) -> Vec<PathBuf> {
    let nested = root.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested } else { root.to_path_buf() };
    CIFAR_BATCHES.iter().map(|f| dir.join(f)).collect()
}

/// Reads the five CIFAR-10 training batches (label byte + 3072 pixel bytes
/// per record) from `root` or `root/cifar-10-batches-bin`.
pub fn read_cifar(root: &Path) -> Result<ImageSet> {
    let mut set = ImageSet { channels: 3, size: 32, classes: 10, pixels: Vec::new(), labels: Vec::new() };
    for file in cifar_files(root) {
        let bytes = fs::read(&file).map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?;
        parse_cifar_records(&bytes, &mut set).map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?;
    }
    Ok(set)
}

pub fn parse_cifar_records(bytes: &[u8], set: &mut ImageSet) -> Result<()> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Dataset(format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len())));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Dataset(format!("label {label} out of range")));
        }
        set.labels.push(label);
        set.pixels.extend(rec[1..].iter().map(|&b| b as f32));
    }
    Ok(())
}

/// Per class, the first `val` images of a seeded shuffle validate and the
/// next `train` train.
fn split_balanced(all: &ImageSet, train: usize, val: usize, seed: u64) -> Result<(ImageSet, ImageSet)> {
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut seeded_rng(seed, 0x5b));
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    let mut seen = vec![0usize; all.classes];
    for i in order {
        let c = all.labels[i];
        if seen[c] < val {
            va.push(i);
        } else if seen[c] < val + train {
            tr.push(i);
        }
        seen[c] += 1;
    }
    if let Some(c) = seen.iter().position(|&n| n < train + val) {
        return Err(Error::Dataset(format!("class {c} has {} images, need {}", seen[c], train + val)));
    }
    Ok((all.subset(&tr), all.subset(&va)))
}

const LATENT: usize = 8;

/// Renders `per_class` images per class. Latents are `N(mu_k, I)` with class
/// means `mu_k ~ N(0, separation^2 I)`. Even latent axes own a flat random
/// color, odd ones a random low-frequency colored sinusoid.
pub fn render_blobs(classes: usize, per_class: usize, size: usize, separation: f64, seed: u64) -> Result<ImageSet> {
    if classes < 2 || size == 0 {
        return Err(Error::Config("blobs need at least 2 classes and a positive size".into()));
    }
    let mut rng = seeded_rng(seed, 0xb1);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let hw = size * size;
    let basis: Vec<Vec<f64>> = (0..LATENT)
        .map(|l| {
            let (fy, fx) = if l % 2 == 0 { (0.0, 0.0) } else { (rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)) };
            let phase: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            (0..3 * hw)
                .map(|i| {
                    let (c, y, x) = (i / hw, (i % hw) / size, i % size);
                    (2.0 * PI * (fy * y as f64 + fx * x as f64) / size as f64 + phase[c]).sin()
                })
                .collect()
        })
        .collect();
    let means: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..LATENT).map(|_| separation * unit.sample(&mut rng)).collect()).collect();
    let mut set = ImageSet { channels: 3, size, classes, pixels: Vec::with_capacity(classes * per_class * 3 * hw), labels: Vec::new() };
    for i in 0..classes * per_class {
        let k = i % classes;
        let z: Vec<f64> = means[k].iter().map(|m| m + unit.sample(&mut rng)).collect();
        for p in 0..3 * hw {
            let v: f64 = z.iter().zip(&basis).map(|(zl, b)| zl * b[p]).sum::<f64>() / (LATENT as f64).sqrt();
            set.pixels.push((127.5 + 127.5 * (0.5 * v).tanh()).round() as f32);
        }
        set.labels.push(k);
    }
    Ok(set)
}

/// Horizontal mirror of a `[C, S, S]` image.
pub fn hflip(image: &[f32], size: usize) -> Vec<f32> {
    let mut out = image.to_vec();
    out.chunks_exact_mut(size).for_each(|row| row.reverse());
    out
}

/// Window of a zero-padded copy: output pixel `(y, x)` reads input
/// `(y + dy - pad, x + dx - pad)`.
pub fn shifted_crop(image: &[f32], size: usize, pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let hw = size * size;
    let mut out = vec![0f32; image.len()];
    for (plane_in, plane_out) in image.chunks_exact(hw).zip(out.chunks_exact_mut(hw)) {
        for y in 0..size {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= size as isize {
                continue;
            }
            for x in 0..size {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < size as isize {
                    plane_out[y * size + x] = plane_in[sy as usize * size + sx as usize];
                }
            }
        }
    }
    out
}

/// Random crop from a 4-pixel zero pad (scaled for other sizes) and a
/// horizontal flip with probability 1/2. Raw pixel scale in and out.
pub fn augment(image: &[f32], size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let pad = (size / 8).max(1);
    let (dy, dx) = (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad));
    let out = shifted_crop(image, size, pad, dy, dx);
    if rng.random_bool(0.5) {
        hflip(&out, size)
    } else {
        out
    }
}

/// Normalized batch tensor for `indices`, augmenting when `rng` is given.
pub fn make_batch<T: Real>(set: &ImageSet, norm: &Normalizer, indices: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Tensor<T> {
    let mut data = Vec::with_capacity(indices.len() * set.image_len());
    for &i in indices {
        let mut img = match rng.as_deref_mut() {
            Some(r) => augment(set.image(i), set.size, r),
            None => set.image(i).to_vec(),
        };
        norm.apply(&mut img);
        data.extend(img.into_iter().map(|v| T::of(v as f64)));
    }
    Tensor::new(&[indices.len(), set.channels, set.size, set.size], data).expect("batch shape")
}

/// Mean over the batch of `-sum(target * log_softmax(logits))` with target
/// `1 - eps` on the label and `eps / classes` everywhere.
pub fn smoothed_cross_entropy<'t, T: Real>(logits: Var<'t, T>, labels: &[usize], eps: f64) -> Result<Var<'t, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension(format!("logits {shape:?} for {} labels", labels.len())));
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Dimension(format!("label {bad} for {k} classes")));
    }
    let off = eps / k as f64;
    let target = Tensor::from_fn(&[n, k], |i| T::of(if i % k == labels[i / k] { 1.0 - eps + off } else { off }));
    let lp = ops::log_softmax(logits, 1)?;
    Ok(ops::scale(ops::sum_all(ops::mul(lp, logits.tape().constant(target))?), -1.0 / n as f64))
}

/// SGD with momentum and L2 weight decay:
/// `v = mu * v + (g + wd * w)`, `w = w - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Grads<T>, lr: f64) {
        let mut updates: Vec<Option<Vec<T>>> = Vec::new();
        module.visit(&mut |p| {
            if p.trainable() {
                updates.push(grads.of_param(p).map(|g| g.data().to_vec()));
            }
        });
        if self.velocity.is_empty() {
            let mut sizes = Vec::new();
            module.visit(&mut |p| {
                if p.trainable() {
                    sizes.push(p.numel());
                }
            });
            self.velocity = sizes.into_iter().map(|n| vec![T::zero(); n]).collect();
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        let mut i = 0;
        let velocity = &mut self.velocity;
        module.visit_mut(&mut |p| {
            if !p.trainable() {
                return;
            }
            let v = &mut velocity[i];
            let g = updates[i].take();
            i += 1;
            let w = p.value_mut().data_mut();
            for (j, (wj, vj)) in w.iter_mut().zip(v.iter_mut()).enumerate() {
                let gj = g.as_ref().map_or(T::zero(), |g| g[j]);
                *vj = mu * *vj + gj + wd * *wj;
                *wj -= lr * *vj;
            }
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

/// Fraction of rows whose label is the arg-max (top-1) or among the `min(5,
/// classes)` largest logits (top-5). Ties rank the lower class first.
pub fn topk_hits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> (usize, usize) {
    let k = logits.dim(1);
    let (mut h1, mut h5) = (0, 0);
    for (row, &l) in logits.data().chunks_exact(k).zip(labels) {
        let above = row.iter().enumerate().filter(|&(j, &v)| v > row[l] || (v == row[l] && j < l)).count();
        h1 += (above == 0) as usize;
        h5 += (above < 5) as usize;
    }
    (h1, h5)
}

/// Predicted classes for a batch of normalized images in eval mode.
pub fn predict<T: Real>(model: &Model<T>, batch: Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let ctx = ForwardCtx::new(&tape, Mode::Eval);
    let out = model.forward(&ctx, tape.constant(batch))?;
    Ok((*out.value()).clone())
}

/// Center-crop (identity at native size) evaluation.
pub fn evaluate<T: Real>(model: &Model<T>, set: &ImageSet, norm: &Normalizer, batch_size: usize) -> Result<Accuracy> {
    if set.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let (mut h1, mut h5) = (0, 0);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let logits = predict(model, make_batch(set, norm, chunk, None))?;
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        let (a, b) = topk_hits(&logits, &labels);
        h1 += a;
        h5 += b;
    }
    let n = set.len() as f64;
    Ok(Accuracy { top1: h1 as f64 / n, top5: h5 as f64 / n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_top1: f64,
    pub final_accuracy: Accuracy,
    pub steps: usize,
    pub seconds: f64,
}

/// Everything a run directory records about its inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub normalizer: Normalizer,
}

/// Trains `model` on `split.train`, validating after every epoch. With a run
/// directory, writes `config.json`, `metrics.csv`, `last.ckpt` and `best.ckpt`.
pub fn train<T: Real>(
    model: &mut Model<T>,
    split: &Split,
    dataset: &DatasetSource,
    config: &TrainConfig,
    run_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunReport> {
    config.validate()?;
    let spec = model.spec();
    if split.train.size != spec.input_hw || split.train.channels != spec.in_channels || split.train.classes != spec.classes {
        return Err(Error::Config(format!(
            "dataset {}x{}px/{} classes does not fit model {} ({}x{}px/{} classes)",
            split.train.channels, split.train.size, split.train.classes, spec.name, spec.in_channels, spec.input_hw, spec.classes
        )));
    }
    if split.train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut metrics_file = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let rc = RunConfig { model: spec.clone(), dataset: dataset.clone(), train: config.clone(), normalizer: split.norm.clone() };
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(&rc)?)?;
            let mut w = csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_err)?;
            w.write_record(["epoch", "lr", "train_loss", "val_top1", "val_top5"]).map_err(csv_err)?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };

    let start = Instant::now();
    let n = split.train.len();
    let per_epoch = n.div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut opt = Sgd::<T>::new(config.momentum, config.weight_decay);
    let mut history = Vec::new();
    let (mut best_epoch, mut best_top1) = (0, f64::NEG_INFINITY);
    let mut step = 0;
    let mut lr = config.lr_at(0, total);
    for epoch in 0..config.epochs {
        let mut rng = seeded_rng(config.seed, 0x1000 + epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            lr = config.lr_at(step, total);
            let x = make_batch::<T>(&split.train, &split.norm, chunk, config.augment.then_some(&mut rng));
            let labels: Vec<usize> = chunk.iter().map(|&i| split.train.labels[i]).collect();
            let tape = Tape::new();
            let ctx = ForwardCtx::new(&tape, Mode::Train);
            let logits = model.forward(&ctx, tape.constant(x))?;
            let loss = smoothed_cross_entropy(logits, &labels, config.label_smoothing)?;
            let value = loss.item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss {value} at epoch {epoch}, batch {b} (lr {lr:.6})"
                )));
            }
            let grads = tape.backward(loss)?;
            opt.step(model, &grads, lr);
            commit_stat_updates(model, &ctx.take_updates());
            loss_sum += value * chunk.len() as f64;
            step += 1;
        }
        let acc = evaluate(model, &split.val, &split.norm, config.batch_size)?;
        let m = EpochMetrics { epoch, lr, train_loss: loss_sum / n as f64, val_top1: acc.top1, val_top5: acc.top5 };
        if let (Some(w), Some(dir)) = (metrics_file.as_mut(), run_dir) {
            w.serialize((m.epoch, m.lr, m.train_loss, m.val_top1, m.val_top5)).map_err(csv_err)?;
            w.flush()?;
            save_checkpoint(model, &dir.join("last.ckpt"))?;
            if acc.top1 > best_top1 {
                save_checkpoint(model, &dir.join("best.ckpt"))?;
            }
        }
        if acc.top1 > best_top1 {
            best_top1 = acc.top1;
            best_epoch = epoch;
        }
        on_epoch(&m);
        history.push(m);
    }
    let final_accuracy = match history.last() {
        Some(m) => Accuracy { top1: m.val_top1, top5: m.val_top5 },
        None => evaluate(model, &split.val, &split.norm, config.batch_size)?,
    };
    if let Some(dir) = run_dir {
        let mut f = fs::File::create(dir.join("summary.json"))?;
        writeln!(f, "{}", serde_json::to_string_pretty(&serde_json::json!({
            "best_epoch": best_epoch,
            "best_top1": best_top1.max(0.0),
            "final": final_accuracy,
            "steps": step,
        }))?)?;
    }
    Ok(RunReport {
        epochs: history,
        best_epoch,
        best_top1: best_top1.max(final_accuracy.top1),
        final_accuracy,
        steps: step,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
