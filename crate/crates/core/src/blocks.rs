//! Residual units and the layers between them.

use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, AttentionOp};
use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::nn::{kaiming_uniform, BatchNorm, ForwardCtx, Linear, Module, Param};
use crate::ops::{self, FootprintSpec};
use crate::tensor::Real;

/// `x + expand(relu(bn2(attention(relu(bn1(x))))))`.
#[derive(Debug, Clone)]
pub struct SABlock<T: Real> {
    pub bn1: BatchNorm<T>,
    pub attention: AttentionOp<T>,
    pub bn2: BatchNorm<T>,
    pub expand: Linear<T>,
}

impl<T: Real> SABlock<T> {
    /// The expansion starts at zero so a fresh block is the identity.
    pub fn new(name: &str, channels: usize, k: usize, config: AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let attention = AttentionOp::new(&format!("{name}.sa"), channels, k, config, rng)?;
        let cm = attention.out_channels();
        Ok(Self {
            bn1: BatchNorm::new(&format!("{name}.bn1"), channels),
            attention,
            bn2: BatchNorm::new(&format!("{name}.bn2"), cm),
            expand: Linear::zeroed(&format!("{name}.expand"), cm, channels, true),
        })
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = ops::relu(self.bn1.forward(ctx, x)?);
        let h = self.attention.forward(ctx, h)?;
        let h = ops::relu(self.bn2.forward(ctx, h)?);
        ops::add(x, self.expand.forward(ctx, h)?)
    }
}

impl<T: Real> Module<T> for SABlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.bn1.visit(f);
        self.attention.visit(f);
        self.bn2.visit(f);
        self.expand.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bn1.visit_mut(f);
        self.attention.visit_mut(f);
        self.bn2.visit_mut(f);
        self.expand.visit_mut(f);
    }
}

/// Convolution kernel `[out, in, k, k]` applied with a fixed footprint.
#[derive(Debug, Clone)]
pub struct Conv<T: Real> {
    pub kernel: Param<T>,
    pub footprint: FootprintSpec,
}

impl<T: Real> Conv<T> {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            kernel: Param::new(format!("{name}.kernel"), kaiming_uniform(&[cout, cin, k, k], cin * k * k, rng)),
            footprint: FootprintSpec::strided(k, stride)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        ops::conv2d(x, self.kernel.bind(ctx.tape), &self.footprint)
    }
}

impl<T: Real> Module<T> for Conv<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.kernel);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.kernel);
    }
}

/// Pre-activation bottleneck: `shortcut(a) + c3(r(bn3(c2(r(bn2(c1(a)))))))`
/// with `a = relu(bn1(x))`. The shortcut is the identity when shapes allow,
/// otherwise a strided 1x1 projection of `a`.
#[derive(Debug, Clone)]
pub struct Bottleneck<T: Real> {
    pub bn1: BatchNorm<T>,
    pub reduce: Linear<T>,
    pub bn2: BatchNorm<T>,
    pub spatial: Conv<T>,
    pub bn3: BatchNorm<T>,
    pub expand: Linear<T>,
    pub projection: Option<Conv<T>>,
}

impl<T: Real> Bottleneck<T> {
    pub fn new(name: &str, cin: usize, width: usize, stride: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cout = 4 * width;
        let projection = (stride != 1 || cin != cout)
            .then(|| Conv::new(&format!("{name}.proj"), cin, cout, 1, stride, rng))
            .transpose()?;
        Ok(Self {
            bn1: BatchNorm::new(&format!("{name}.bn1"), cin),
            reduce: Linear::new(&format!("{name}.reduce"), cin, width, false, rng),
            bn2: BatchNorm::new(&format!("{name}.bn2"), width),
            spatial: Conv::new(&format!("{name}.conv"), width, width, 3, stride, rng)?,
            bn3: BatchNorm::new(&format!("{name}.bn3"), width),
            expand: Linear::zeroed(&format!("{name}.expand"), width, cout, false),
            projection,
        })
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = ops::relu(self.bn1.forward(ctx, x)?);
        let shortcut = match &self.projection {
            Some(p) => p.forward(ctx, a)?,
            None => x,
        };
        let h = ops::relu(self.bn2.forward(ctx, self.reduce.forward(ctx, a)?)?);
        let h = ops::relu(self.bn3.forward(ctx, self.spatial.forward(ctx, h)?)?);
        ops::add(shortcut, self.expand.forward(ctx, h)?)
    }
}

impl<T: Real> Module<T> for Bottleneck<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.bn1.visit(f);
        self.reduce.visit(f);
        self.bn2.visit(f);
        self.spatial.visit(f);
        self.bn3.visit(f);
        self.expand.visit(f);
        if let Some(p) = &self.projection {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bn1.visit_mut(f);
        self.reduce.visit_mut(f);
        self.bn2.visit_mut(f);
        self.spatial.visit_mut(f);
        self.bn3.visit_mut(f);
        self.expand.visit_mut(f);
        if let Some(p) = &mut self.projection {
            p.visit_mut(f);
        }
    }
}

/// `linear(maxpool(relu(bn(x))))`; the 2x2/2 pooling can be disabled for
/// stages that keep the input resolution.
#[derive(Debug, Clone)]
pub struct Transition<T: Real> {
    pub bn: BatchNorm<T>,
    pub pool: bool,
    pub linear: Linear<T>,
}

impl<T: Real> Transition<T> {
    pub fn new(name: &str, cin: usize, cout: usize, pool: bool, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bn: BatchNorm::new(&format!("{name}.bn"), cin),
            pool,
            linear: Linear::new(&format!("{name}.linear"), cin, cout, true, rng),
        }
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let xs = x.shape();
        if self.pool && (xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2)) {
            return Err(dim_err!("transition pooling needs even spatial extents, got {xs:?}"));
        }
        let mut h = ops::relu(self.bn.forward(ctx, x)?);
        if self.pool {
            h = ops::max_pool2d(h, 2, 2, 0)?;
        }
        self.linear.forward(ctx, h)
    }
}

impl<T: Real> Module<T> for Transition<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.bn.visit(f);
        self.linear.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bn.visit_mut(f);
        self.linear.visit_mut(f);
    }
}

/// Convolutional stem: 7x7 stride-2 conv, BN, ReLU, 3x3 stride-2 max pool.
#[derive(Debug, Clone)]
pub struct ConvStem<T: Real> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Real> ConvStem<T> {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(&format!("{name}.conv"), cin, cout, 7, 2, rng)?,
            bn: BatchNorm::new(&format!("{name}.bn"), cout),
        })
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = ops::relu(self.bn.forward(ctx, self.conv.forward(ctx, x)?)?);
        ops::max_pool2d(h, 3, 2, 1)
    }
}

impl<T: Real> Module<T> for ConvStem<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// `linear(gap(relu(bn(x))))`, producing logits.
#[derive(Debug, Clone)]
pub struct Classifier<T: Real> {
    pub bn: BatchNorm<T>,
    pub linear: Linear<T>,
}

impl<T: Real> Classifier<T> {
    pub fn new(name: &str, channels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            bn: BatchNorm::new(&format!("{name}.bn"), channels),
            linear: Linear::new(&format!("{name}.fc"), channels, classes, true, rng),
        }
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = ops::global_avg_pool(ops::relu(self.bn.forward(ctx, x)?))?;
        self.linear.forward(ctx, h)
    }
}

impl<T: Real> Module<T> for Classifier<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.bn.visit(f);
        self.linear.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.bn.visit_mut(f);
        self.linear.visit_mut(f);
    }
}
