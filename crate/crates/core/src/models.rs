//! Network descriptions, builders and checkpoint files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, PairwiseRelation, PatchRelation};
use crate::autograd::Var;
use crate::blocks::{Bottleneck, Classifier, ConvStem, SABlock, Transition};
use crate::error::{config_err, Error, Result};
use crate::nn::{seeded_rng, ForwardCtx, Linear, Module, Param};
use crate::tensor::{Dtype, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SanStage {
    pub channels: usize,
    pub blocks: usize,
    pub footprint: usize,
    /// Whether the transition into this stage halves the resolution.
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResStage {
    /// Bottleneck width; the stage outputs `4 * width` channels.
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    San { stem_channels: usize, stages: Vec<SanStage>, attention: AttentionConfig },
    Resnet { stem_channels: usize, stages: Vec<ResStage> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_hw: usize,
    pub in_channels: usize,
    pub classes: usize,
    #[serde(flatten)]
    pub arch: Architecture,
}

pub const SAN_CHANNELS: [usize; 5] = [64, 256, 512, 1024, 2048];
pub const SAN_FOOTPRINTS: [usize; 5] = [3, 7, 7, 7, 7];
pub const PRESETS: [&str; 7] = ["san10", "san15", "san19", "resnet26", "resnet38", "resnet50", "san-tiny"];

impl ModelSpec {
    pub fn san(name: &str, blocks: [usize; 5], attention: AttentionConfig) -> Self {
        let stages = SAN_CHANNELS
            .iter()
            .zip(blocks)
            .zip(SAN_FOOTPRINTS)
            .map(|((&channels, blocks), footprint)| SanStage { channels, blocks, footprint, pool: true })
            .collect();
        Self {
            name: name.into(),
            input_hw: 224,
            in_channels: 3,
            classes: 1000,
            arch: Architecture::San { stem_channels: 64, stages, attention },
        }
    }

    pub fn resnet(name: &str, blocks: [usize; 4]) -> Self {
        let stages = [64, 128, 256, 512]
            .into_iter()
            .zip(blocks)
            .enumerate()
            .map(|(i, (width, blocks))| ResStage { width, blocks, stride: if i == 0 { 1 } else { 2 } })
            .collect();
        Self {
            name: name.into(),
            input_hw: 224,
            in_channels: 3,
            classes: 1000,
            arch: Architecture::Resnet { stem_channels: 64, stages },
        }
    }

    /// Three-stage network for 32x32 inputs and ten classes.
    pub fn san_tiny(attention: AttentionConfig) -> Self {
        let stage = |channels, footprint, pool| SanStage { channels, blocks: 1, footprint, pool };
        Self {
            name: "san-tiny".into(),
            input_hw: 32,
            in_channels: 3,
            classes: 10,
            arch: Architecture::San {
                stem_channels: 16,
                stages: vec![stage(16, 3, false), stage(32, 5, true), stage(64, 5, true)],
                attention: attention.with_reductions(4, 2, 2),
            },
        }
    }

    /// Looks up a named preset. SAN presets take the given operator; the
    /// default is pairwise subtraction.
    pub fn preset(name: &str, attention: Option<AttentionConfig>) -> Result<Self> {
        let att = attention.unwrap_or_else(|| AttentionConfig::pairwise(PairwiseRelation::Subtraction));
        Ok(match name {
            "san10" => Self::san(name, [2, 1, 2, 4, 1], att),
            "san15" => Self::san(name, [3, 2, 3, 5, 2], att),
            "san19" => Self::san(name, [3, 3, 4, 6, 3], att),
            "resnet26" => Self::resnet(name, [1, 2, 4, 1]),
            "resnet38" => Self::resnet(name, [2, 3, 5, 2]),
            "resnet50" => Self::resnet(name, [3, 4, 6, 3]),
            "san-tiny" => Self::san_tiny(att),
            _ => return Err(config_err!("unknown model '{name}' (expected one of {})", PRESETS.join(", "))),
        })
    }

    pub fn patchwise_default() -> AttentionConfig {
        AttentionConfig::patchwise(PatchRelation::Concatenation)
    }

    /// Sets the footprint of every stage after the first.
    pub fn with_footprint(mut self, k: usize) -> Result<Self> {
        match &mut self.arch {
            Architecture::San { stages, .. } => {
                stages.iter_mut().skip(1).for_each(|s| s.footprint = k);
                Ok(self)
            }
            Architecture::Resnet { .. } => Err(config_err!("footprint override applies to SAN models only")),
        }
    }

    pub fn attention(&self) -> Option<&AttentionConfig> {
        match &self.arch {
            Architecture::San { attention, .. } => Some(attention),
            Architecture::Resnet { .. } => None,
        }
    }

    pub fn attention_mut(&mut self) -> Option<&mut AttentionConfig> {
        match &mut self.arch {
            Architecture::San { attention, .. } => Some(attention),
            Architecture::Resnet { .. } => None,
        }
    }

    /// Checks that every stage can be built.
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.in_channels == 0 {
            return Err(config_err!("classes and input channels must be positive"));
        }
        let mut hw = self.input_hw;
        match &self.arch {
            Architecture::San { stages, attention, .. } => {
                for (i, s) in stages.iter().enumerate() {
                    if s.pool {
                        if !hw.is_multiple_of(2) {
                            return Err(config_err!("stage {i}: cannot pool odd extent {hw}"));
                        }
                        hw /= 2;
                    }
                    if s.blocks > 0 {
                        attention.widths(s.channels).map_err(|e| config_err!("stage {i}: {e}"))?;
                        crate::ops::FootprintSpec::same(s.footprint).map_err(|e| config_err!("stage {i}: {e}"))?;
                    }
                }
            }
            Architecture::Resnet { stages, .. } => {
                if stages.iter().any(|s| s.stride == 0 || s.width == 0) {
                    return Err(config_err!("resnet stages need positive width and stride"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Body<T: Real> {
    San { stem: Linear<T>, stages: Vec<(Transition<T>, Vec<SABlock<T>>)> },
    Resnet { stem: ConvStem<T>, stages: Vec<Vec<Bottleneck<T>>> },
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    spec: ModelSpec,
    body: Body<T>,
    head: Classifier<T>,
}

/// Builds `spec` with parameters drawn deterministically from `seed`.
pub fn build<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut rng = seeded_rng(seed, 0);
    let (body, width) = match &spec.arch {
        Architecture::San { stem_channels, stages, attention } => {
            let stem = Linear::new("stem", spec.in_channels, *stem_channels, true, &mut rng);
            let mut cin = *stem_channels;
            let mut built = Vec::with_capacity(stages.len());
            for (i, s) in stages.iter().enumerate() {
                let t = Transition::new(&format!("stage{i}.transition"), cin, s.channels, s.pool, &mut rng);
                let blocks = (0..s.blocks)
                    .map(|b| SABlock::new(&format!("stage{i}.block{b}"), s.channels, s.footprint, *attention, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                built.push((t, blocks));
                cin = s.channels;
            }
            (Body::San { stem, stages: built }, cin)
        }
        Architecture::Resnet { stem_channels, stages } => {
            let stem = ConvStem::new("stem", spec.in_channels, *stem_channels, &mut rng)?;
            let mut cin = *stem_channels;
            let mut built = Vec::with_capacity(stages.len());
            for (i, s) in stages.iter().enumerate() {
                let mut blocks = Vec::with_capacity(s.blocks);
                for b in 0..s.blocks {
                    let stride = if b == 0 { s.stride } else { 1 };
                    blocks.push(Bottleneck::new(&format!("stage{i}.block{b}"), cin, s.width, stride, &mut rng)?);
                    cin = 4 * s.width;
                }
                built.push(blocks);
            }
            (Body::Resnet { stem, stages: built }, cin)
        }
    };
    let head = Classifier::new("head", width, spec.classes, &mut rng);
    Ok(Model { spec: spec.clone(), body, head })
}

impl<T: Real> Model<T> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// `[N, C, H, W]` images to `[N, classes]` logits.
    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = match &self.body {
            Body::San { stem, stages } => {
                let mut h = stem.forward(ctx, x)?;
                for (t, blocks) in stages {
                    h = t.forward(ctx, h)?;
                    for b in blocks {
                        h = b.forward(ctx, h)?;
                    }
                }
                h
            }
            Body::Resnet { stem, stages } => {
                let mut h = stem.forward(ctx, x)?;
                for b in stages.iter().flatten() {
                    h = b.forward(ctx, h)?;
                }
                h
            }
        };
        h = self.head.forward(ctx, h)?;
        Ok(h)
    }

    /// Every parameter (trainable or buffer) in declaration order.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        self.visit(&mut |p| v.push(p));
        v
    }

    /// Trainable scalar count grouped by top-level layer, in forward order.
    pub fn layer_param_counts(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for p in self.params().into_iter().filter(|p| p.trainable()) {
            let key = layer_key(p.name());
            match groups.last_mut() {
                Some((k, n)) if *k == key => *n += p.numel(),
                _ => groups.push((key, p.numel())),
            }
        }
        groups
    }
}

/// Strips a parameter name down to its block: `stage1.block0.sa.phi.weight`
/// becomes `stage1.block0`.
pub fn layer_key(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = if parts.first().is_some_and(|p| p.starts_with("stage")) { 2 } else { 1 };
    parts[..depth.min(parts.len())].join(".")
}

impl<T: Real> Module<T> for Model<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match &self.body {
            Body::San { stem, stages } => {
                stem.visit(f);
                for (t, blocks) in stages {
                    t.visit(f);
                    blocks.iter().for_each(|b| b.visit(f));
                }
            }
            Body::Resnet { stem, stages } => {
                stem.visit(f);
                stages.iter().flatten().for_each(|b| b.visit(f));
            }
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.body {
            Body::San { stem, stages } => {
                stem.visit_mut(f);
                for (t, blocks) in stages {
                    t.visit_mut(f);
                    blocks.iter_mut().for_each(|b| b.visit_mut(f));
                }
            }
            Body::Resnet { stem, stages } => {
                stem.visit_mut(f);
                stages.iter_mut().flatten().for_each(|b| b.visit_mut(f));
            }
        }
        self.head.visit_mut(f);
    }
}

const CHECKPOINT_FORMAT: &str = "san-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    dtype: Dtype,
    spec: ModelSpec,
    params: Vec<ParamEntry>,
}

/// Writes the spec and every parameter (including batch-norm running
/// statistics) as a length-prefixed JSON header followed by little-endian
/// buffers in declaration order.
pub fn save_checkpoint<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let params = model.params();
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        spec: model.spec.clone(),
        params: params.iter().map(|p| ParamEntry { name: p.name().into(), shape: p.value().shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for p in params {
        buf.clear();
        for &v in p.value().data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

const MAX_HEADER: u64 = 64 << 20;

/// Reads a checkpoint written by [`save_checkpoint`]. The file must match the
/// element type and describe exactly the parameters its spec builds.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Model<T>> {
    let ck = |m: String| Error::Checkpoint(m);
    let mut r = BufReader::new(File::open(path)?);
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| ck("file too short for header length".into()))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(ck(format!("header length {len} exceeds limit")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|_| ck("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| ck(format!("malformed header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(ck(format!("unsupported format {} v{}", header.format, header.version)));
    }
    if header.dtype != T::DTYPE {
        return Err(ck(format!("checkpoint holds {:?}, requested {:?}", header.dtype, T::DTYPE)));
    }
    let mut model = build::<T>(&header.spec, 0)?;
    let expected: Vec<(String, Vec<usize>)> =
        model.params().iter().map(|p| (p.name().to_owned(), p.value().shape().to_vec())).collect();
    let listed: Vec<(String, Vec<usize>)> = header.params.into_iter().map(|e| (e.name, e.shape)).collect();
    if expected != listed {
        return Err(ck("parameter list does not match the spec".into()));
    }
    let mut values = Vec::with_capacity(expected.len());
    let width = T::DTYPE.size_of();
    for (_, shape) in &expected {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * width];
        r.read_exact(&mut bytes).map_err(|_| ck("truncated parameter data".into()))?;
        let data: Vec<T> = bytes.chunks_exact(width).map(T::read_le).collect();
        values.push(Tensor::new(shape, data)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(ck("trailing bytes after parameter data".into()));
    }
    let mut it = values.into_iter();
    model.visit_mut(&mut |p| p.set(it.next().expect("counted above")));
    Ok(model)
}
