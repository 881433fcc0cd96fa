//! Zero-shot rotation/flip evaluation and targeted PGD attacks.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::{seeded_rng, ForwardCtx, Mode};
use crate::tensor::{Real, Tensor};
use crate::train::{evaluate, make_batch, smoothed_cross_entropy, Accuracy, ImageSet, Normalizer};

pub const PIXEL_MAX: f32 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Manipulation {
    None,
    Cw90,
    Cw180,
    Cw270,
    UpsideDownFlip,
}

impl Manipulation {
    pub const ALL: [Manipulation; 5] =
        [Manipulation::None, Manipulation::Cw90, Manipulation::Cw180, Manipulation::Cw270, Manipulation::UpsideDownFlip];

    pub fn label(self) -> &'static str {
        match self {
            Manipulation::None => "none",
            Manipulation::Cw90 => "cw90",
            Manipulation::Cw180 => "cw180",
            Manipulation::Cw270 => "cw270",
            Manipulation::UpsideDownFlip => "upside_down_flip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown manipulation '{s}'")))
    }

    /// Source pixel `(row, col)` that lands on `(y, x)` of an `s x s` grid.
    fn source(self, y: usize, x: usize, s: usize) -> (usize, usize) {
        match self {
            Manipulation::None => (y, x),
            Manipulation::Cw90 => (s - 1 - x, y),
            Manipulation::Cw180 => (s - 1 - y, s - 1 - x),
            Manipulation::Cw270 => (x, s - 1 - y),
            Manipulation::UpsideDownFlip => (s - 1 - y, x),
        }
    }
}

/// Applies `m` to every `h x w` plane of `image`. Rotations need `h == w`.
pub fn manipulate<T: Copy>(image: &[T], h: usize, w: usize, m: Manipulation) -> Result<Vec<T>> {
    let hw = h * w;
    if hw == 0 || !image.len().is_multiple_of(hw) {
        return Err(Error::Dimension(format!("{} values are not whole {h}x{w} planes", image.len())));
    }
    if matches!(m, Manipulation::Cw90 | Manipulation::Cw270) && h != w {
        return Err(Error::Dimension(format!("{m:?} needs a square image, got {h}x{w}")));
    }
    if m == Manipulation::Cw180 && h != w {
        let flipped = manipulate(image, h, w, Manipulation::UpsideDownFlip)?;
        return Ok(flipped.chunks_exact(w).flat_map(|r| r.iter().rev().copied()).collect());
    }
    let mut out = Vec::with_capacity(image.len());
    for plane in image.chunks_exact(hw) {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = m.source(y, x, h);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Ok(out)
}

pub fn manipulate_set(set: &ImageSet, m: Manipulation) -> Result<ImageSet> {
    let mut out = set.clone();
    out.pixels = manipulate(&set.pixels, set.size, set.size, m)?;
    Ok(out)
}

/// Targeted PGD on the raw 0-255 pixel scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub eps: f32,
    pub step: f32,
    pub iters: usize,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.step >= 0.0) {
            return Err(Error::Config("attack eps and step must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub adversarial: ImageSet,
    pub targets: Vec<usize>,
    pub success: Vec<bool>,
    /// Largest `|adv - clean|` seen after each iteration.
    pub linf_per_step: Vec<f32>,
}

impl AttackOutcome {
    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len().max(1) as f64
    }
}

/// Uniform random class other than `label`, drawn from a stream keyed by
/// the image index.
pub fn pick_target(label: usize, classes: usize, seed: u64, index: usize) -> usize {
    let t = seeded_rng(seed, 0xa77 + index as u64).random_range(0..classes - 1);
    if t >= label {
        t + 1
    } else {
        t
    }
}

fn logits<T: Real>(model: &Model<T>, set: &ImageSet, norm: &Normalizer, idx: &[usize]) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let ctx = ForwardCtx::new(&tape, Mode::Eval);
    let out = model.forward(&ctx, tape.constant(make_batch(set, norm, idx, None)))?;
    Ok((*out.value()).clone())
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Runs `cfg.iters` steps of `x <- clip(x - step * sign(grad CE(x, target)))`
/// from the clean images, clipping to the `eps` ball and `[0, 255]`. Fails if
/// an iterate ever leaves the ball.
pub fn pgd_attack<T: Real>(
    model: &Model<T>,
    set: &ImageSet,
    norm: &Normalizer,
    cfg: &AttackConfig,
    seed: u64,
    batch_size: usize,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    if set.classes < 2 {
        return Err(Error::Config("targeted attack needs at least two classes".into()));
    }
    let targets: Vec<usize> = (0..set.len()).map(|i| pick_target(set.labels[i], set.classes, seed, i)).collect();
    let mut adv = set.clone();
    let plane = set.size * set.size;
    let mut linf = vec![0f32; cfg.iters];
    let all: Vec<usize> = (0..set.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let chunk_targets: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
        for step in 0..cfg.iters {
            let tape = Tape::new();
            let ctx = ForwardCtx::new(&tape, Mode::Eval);
            let x = tape.leaf(make_batch::<T>(&adv, norm, chunk, None));
            let out = model.forward(&ctx, x)?;
            let loss = smoothed_cross_entropy(out, &chunk_targets, 0.0)?;
            let grads = tape.backward(loss)?;
            let g = grads.of(x).ok_or_else(|| Error::Usage("no input gradient for the attack".into()))?;
            for (b, &i) in chunk.iter().enumerate() {
                let n = set.image_len();
                let clean = set.image(i);
                let cur = &mut adv.pixels[i * n..(i + 1) * n];
                for (p, v) in cur.iter_mut().enumerate() {
                    // normalization divides by a positive std, so the sign carries over
                    let gv = g.data()[b * n + p].to_f64().unwrap_or(f64::NAN);
                    let s = if gv > 0.0 { 1.0 } else if gv < 0.0 { -1.0 } else { 0.0 };
                    let c = clean[p];
                    *v = (*v - cfg.step * s).clamp(c - cfg.eps, c + cfg.eps).clamp(0.0, PIXEL_MAX);
                    let d = (*v - c).abs();
                    if !(d <= cfg.eps) {
                        return Err(Error::Numerical(format!(
                            "PGD iterate left the eps ball: |delta| = {d} > {} at image {i}, channel {}",
                            cfg.eps,
                            p / plane
                        )));
                    }
                    linf[step] = linf[step].max(d);
                }
            }
        }
    }
    let mut success = vec![false; set.len()];
    for chunk in all.chunks(batch_size.max(1)) {
        let out = logits(model, &adv, norm, chunk)?;
        for (row, &i) in out.data().chunks_exact(set.classes).zip(chunk) {
            success[i] = argmax(row) == targets[i];
        }
    }
    Ok(AttackOutcome { adversarial: adv, targets, success, linf_per_step: linf })
}

#[derive(Debug, Clone, Serialize)]
pub struct ManipulationRow {
    pub manipulation: Manipulation,
    pub top1: f64,
    pub top5: f64,
    pub drop_top1: f64,
    pub drop_top5: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackRow {
    pub attack: AttackConfig,
    pub success_rate: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub model: String,
    pub images: usize,
    pub clean: Accuracy,
    pub manipulations: Vec<ManipulationRow>,
    pub attacks: Vec<AttackRow>,
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn with_drop(v: f64, drop: f64) -> String {
    format!("{} ({})", pct(v), pct(drop))
}

impl RobustnessReport {
    /// One row per manipulation (enum order) then per attack; accuracy cells
    /// read `value (drop)` in percentage points.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,setting,top1,top5,success_rate\n");
        for r in &self.manipulations {
            let _ = writeln!(
                s,
                "manipulation,{},{},{},",
                r.manipulation.label(),
                with_drop(r.top1, r.drop_top1),
                with_drop(r.top5, r.drop_top5)
            );
        }
        for r in &self.attacks {
            let a = r.attack;
            let _ = writeln!(
                s,
                "attack,eps={} step={} n={},{},,{}",
                a.eps,
                a.step,
                a.iters,
                with_drop(r.top1, self.clean.top1 - r.top1),
                pct(r.success_rate)
            );
        }
        s
    }
}

/// Evaluates `set` clean, under each of `manipulations` and under each attack.
/// Drops are measured against the clean accuracy.
pub fn robustness_report<T: Real>(
    model: &Model<T>,
    set: &ImageSet,
    norm: &Normalizer,
    manipulations: &[Manipulation],
    attacks: &[AttackConfig],
    seed: u64,
    batch_size: usize,
) -> Result<RobustnessReport> {
    let clean = evaluate(model, set, norm, batch_size)?;
    let mut rows_m = Vec::new();
    for &m in manipulations {
        let acc = if m == Manipulation::None { clean } else { evaluate(model, &manipulate_set(set, m)?, norm, batch_size)? };
        rows_m.push(ManipulationRow {
            manipulation: m,
            top1: acc.top1,
            top5: acc.top5,
            drop_top1: clean.top1 - acc.top1,
            drop_top5: clean.top5 - acc.top5,
        });
    }
    let mut rows = Vec::new();
    for a in attacks {
        let out = pgd_attack(model, set, norm, a, seed, batch_size)?;
        let top1 = evaluate(model, &out.adversarial, norm, batch_size)?.top1;
        rows.push(AttackRow { attack: *a, success_rate: out.success_rate(), top1 });
    }
    Ok(RobustnessReport { model: model.spec().name.clone(), images: set.len(), clean, manipulations: rows_m, attacks: rows })
}

/// A fixed seeded sample of `count` images (all of them when `count` is
/// larger than the set).
pub fn sample_images(set: &ImageSet, count: usize, seed: u64) -> ImageSet {
    let mut idx: Vec<usize> = (0..set.len()).collect();
    idx.shuffle(&mut seeded_rng(seed, 0x5a));
    idx.truncate(count);
    idx.sort_unstable();
    set.subset(&idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cw90_on_two_by_two() {
        // [a, b; c, d] -> [c, a; d, b]
        assert_eq!(manipulate(&['a', 'b', 'c', 'd'], 2, 2, Manipulation::Cw90).unwrap(), vec!['c', 'a', 'd', 'b']);
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img: Vec<f32> = (0..3 * 25).map(|v| v as f32 * 0.37).collect();
        let mut x = img.clone();
        for _ in 0..4 {
            x = manipulate(&x, 5, 5, Manipulation::Cw90).unwrap();
        }
        assert_eq!(x, img);
    }

    #[test]
    fn half_turn_is_upside_down_then_mirror() {
        let img: Vec<u32> = (0..2 * 16).collect();
        let ud = manipulate(&img, 4, 4, Manipulation::UpsideDownFlip).unwrap();
        let mirrored: Vec<u32> = ud.chunks_exact(4).flat_map(|r| r.iter().rev().copied()).collect();
        assert_eq!(manipulate(&img, 4, 4, Manipulation::Cw180).unwrap(), mirrored);
        assert_eq!(
            manipulate(&manipulate(&img, 4, 4, Manipulation::Cw90).unwrap(), 4, 4, Manipulation::Cw270).unwrap(),
            img
        );
    }

    #[test]
    fn rotation_needs_square() {
        assert!(manipulate(&[0u8; 6], 2, 3, Manipulation::Cw90).is_err());
        assert!(manipulate(&[0u8; 6], 2, 3, Manipulation::UpsideDownFlip).is_ok());
    }

    #[test]
    fn targets_avoid_label() {
        for i in 0..200 {
            let t = pick_target(i % 10, 10, 3, i);
            assert_ne!(t, i % 10);
            assert!(t < 10);
            assert_eq!(t, pick_target(i % 10, 10, 3, i));
        }
    }

    #[test]
    fn drop_format() {
        assert_eq!(with_drop(0.491, 0.245), "49.1 (24.5)");
    }
}
