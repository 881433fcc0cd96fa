//! Constructive checks of structural identities between operators.

use rand::Rng;

use crate::attention::{AttentionConfig, AttentionOp, Operator, PairwiseRelation, PatchRelation, PositionMode};
use crate::autograd::Tape;
use crate::blocks::{Bottleneck, SABlock};
use crate::error::{config_err, Result};
use crate::gradcheck::randomize;
use crate::nn::{seeded_rng, ForwardCtx, Module};
use crate::ops::{self, FootprintSpec};
use crate::oracle::small_config;
use crate::tensor::{Real, Tensor};

const SHAPE: [usize; 4] = [2, 16, 5, 5];

fn random<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = seeded_rng(seed, 7);
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

fn run<T: Real>(op: &AttentionOp<T>, x: &Tensor<T>, order: Option<&[usize]>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let ctx = ForwardCtx::eval(&tape);
    let out = op.forward_with_slot_order(&ctx, tape.constant(x.clone()), order)?;
    let v = (*out.value()).clone();
    Ok(v)
}

fn footprint_of(order: &[usize]) -> Result<usize> {
    let k = (order.len() as f64).sqrt().round() as usize;
    if k * k != order.len() {
        return Err(config_err!("slot order of length {} is not a square footprint", order.len()));
    }
    Ok(k)
}

/// Largest output change when the footprint slots are visited in `order`
/// instead of raster order.
pub fn slot_permutation_gap<T: Real>(operator: Operator, order: &[usize], seed: u64) -> Result<f64> {
    let k = footprint_of(order)?;
    let op = AttentionOp::<T>::new("op", SHAPE[1], k, small_config(operator), &mut seeded_rng(seed, 0))?;
    let x = random::<T>(&SHAPE, seed);
    run(&op, &x, None)?.max_abs_diff(&run(&op, &x, Some(order))?)
}

/// Largest absolute output of `operator` on the permutation input, used to
/// scale single-precision comparisons.
pub fn output_scale<T: Real>(operator: Operator, k: usize, seed: u64) -> Result<f64> {
    let op = AttentionOp::<T>::new("op", SHAPE[1], k, small_config(operator), &mut seeded_rng(seed, 0))?;
    let y = run(&op, &random::<T>(&SHAPE, seed), None)?;
    Ok(y.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN).abs()).fold(0.0, f64::max))
}

/// Patchwise attention whose weight perceptron outputs a constant per slot,
/// shared across all value channels, equals a convolution with kernel
/// `K[o, c, j] = k_j * W_beta[o, c]`. Returns the largest gap at `k = 3`.
pub fn patchwise_conv_gap(relation: PatchRelation, seed: u64) -> Result<f64> {
    let (c, k) = (SHAPE[1], 3);
    let slots = k * k;
    let mut rng = seeded_rng(seed, 0);
    let cfg = AttentionConfig::patchwise(relation).with_reductions(4, 2, 8);
    let mut op = AttentionOp::<f64>::new("op", c, k, cfg, &mut rng)?;
    let slot_kernel: Vec<f64> = (0..slots).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gamma = op.gamma.as_mut().ok_or_else(|| config_err!("patchwise operator without a weight perceptron"))?;
    gamma.set_constant(Tensor::from_f64(&[slots], &slot_kernel)?)?;

    let wb = op.beta.as_ref().ok_or_else(|| config_err!("patchwise operator without a value map"))?.weight.value().clone();
    let cm = wb.dim(0);
    let kernel = Tensor::from_fn(&[cm, c, k, k], |i| {
        let (o, rest) = (i / (c * slots), i % (c * slots));
        slot_kernel[rest % slots] * wb.at(&[o, rest / slots])
    });
    let x = random::<f64>(&SHAPE, seed);
    let tape = Tape::new();
    let conv = ops::conv2d(tape.constant(x.clone()), tape.constant(kernel), &FootprintSpec::same(k)?)?;
    let reference = conv.value();
    run(&op, &x, None)?.max_abs_diff(&reference)
}

/// Scalar attention against pairwise dot-product attention whose weight
/// perceptron is a single `1 -> 1` identity layer, with shared transforms.
pub fn scalar_dot_gap(seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed, 0);
    let scalar_cfg = small_config(Operator::Scalar { normalize: false });
    let scalar = AttentionOp::<f64>::new("s", SHAPE[1], 3, scalar_cfg, &mut rng)?;
    let dot_cfg = AttentionConfig {
        operator: Operator::Pairwise { relation: PairwiseRelation::Dot, position: PositionMode::None },
        gamma_depth: 1,
        ..scalar_cfg
    };
    let mut dot = AttentionOp::<f64>::new("d", SHAPE[1], 3, dot_cfg, &mut rng)?;
    dot.phi = scalar.phi.clone();
    dot.psi = scalar.psi.clone();
    dot.beta = scalar.beta.clone();
    let layer = &mut dot.gamma.as_mut().ok_or_else(|| config_err!("dot operator without a weight perceptron"))?.layers[0];
    if layer.weight.value().shape() != [1, 1] {
        return Err(config_err!("expected a 1 -> 1 weight perceptron, got {:?}", layer.weight.value().shape()));
    }
    layer.weight.set(Tensor::ones(&[1, 1]));
    if let Some(b) = layer.bias.as_mut() {
        b.set(Tensor::zeros(&[1]));
    }
    let x = random::<f64>(&SHAPE, seed);
    run(&scalar, &x, None)?.max_abs_diff(&run(&dot, &x, None)?)
}

fn zero_expansion<M: Module<f64>>(block: &mut M, seed: u64) {
    randomize(block, &mut seeded_rng(seed, 3));
    block.visit_mut(&mut |p| {
        if p.name().contains(".expand.") {
            let shape = p.value().shape().to_vec();
            p.set(Tensor::zeros(&shape));
        }
    });
}

/// Pairwise, patchwise and bottleneck residual units with random weights
/// except a zeroed expansion; true when every output equals its input bit
/// for bit in both modes.
pub fn residual_identity(seed: u64) -> Result<bool> {
    let x = random::<f64>(&[2, 16, 6, 6], seed);
    let mut rng = seeded_rng(seed, 1);
    let mut ok = true;
    let mut check = |f: &dyn Fn(&ForwardCtx<'_, f64>) -> Result<bool>| -> Result<()> {
        let tape = Tape::new();
        ok &= f(&ForwardCtx::train(&tape))?;
        let tape = Tape::new();
        ok &= f(&ForwardCtx::eval(&tape))?;
        Ok(())
    };
    for cfg in [AttentionConfig::pairwise(PairwiseRelation::Subtraction), AttentionConfig::patchwise(PatchRelation::Concatenation)] {
        let mut block = SABlock::<f64>::new("b", 16, 3, cfg.with_reductions(4, 2, 2), &mut rng)?;
        zero_expansion(&mut block, seed);
        check(&|ctx| Ok(*block.forward(ctx, ctx.tape.constant(x.clone()))?.value() == x))?;
    }
    let mut bottleneck = Bottleneck::<f64>::new("r", 16, 4, 1, &mut rng)?;
    zero_expansion(&mut bottleneck, seed);
    check(&|ctx| Ok(*bottleneck.forward(ctx, ctx.tape.constant(x.clone()))?.value() == x))?;
    Ok(ok)
}
