//! Central finite-difference checks of tape gradients in double precision.
//!
//! Each case reduces its output to `L = sum(out * R)` with a fixed random `R`
//! and compares `dL/dv` from the tape with `(L(v + h) - L(v - h)) / 2h` for
//! every input scalar and every trainable parameter scalar.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionConfig, AttentionOp, Operator, PairwiseRelation, PatchRelation};
use crate::autograd::{Tape, Var};
use crate::blocks::{Bottleneck, SABlock, Transition};
use crate::error::Result;
use crate::nn::{seeded_rng, ForwardCtx, Mode, Module, Param};
use crate::ops::{self, FootprintSpec};
use crate::oracle::{small_config, sweep_operators};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences carry
/// roundoff near `eps * |L| / h`, about 1e-9 here, so entries whose true
/// gradient is zero or tiny are judged by an absolute error of `FLOOR * tol`.
pub const FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub step: f64,
    pub tolerance: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Negates every analytic gradient; used to confirm the checker can fail.
    pub wrong_sign: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self { step: STEP, tolerance: TOLERANCE, mode: Mode::Train, seed: 0, wrong_sign: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub case: String,
    pub shape: Vec<usize>,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Stand-in module for parameter-free cases.
pub struct NoParams;

impl Module<f64> for NoParams {
    fn visit<'a>(&'a self, _: &mut dyn FnMut(&'a Param<f64>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param<f64>)) {}
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn nudge<M: Module<f64>>(module: &mut M, index: usize, elem: usize, delta: f64) {
    let mut i = 0;
    module.visit_mut(&mut |p| {
        if p.trainable() {
            if i == index {
                p.value_mut().data_mut()[elem] += delta;
            }
            i += 1;
        }
    });
}

/// Checks `forward(module, inputs)` against finite differences.
pub fn check<M, F>(case: &str, module: &mut M, inputs: &[Tensor<f64>], forward: F, opts: Options) -> Result<GradReport>
where
    M: Module<f64>,
    F: for<'t> Fn(&M, &ForwardCtx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let loss = |module: &M, inputs: &[Tensor<f64>], weights: &Tensor<f64>| -> Result<f64> {
        let tape = Tape::new();
        let ctx = ForwardCtx::new(&tape, opts.mode);
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = forward(module, &ctx, &vars)?;
        Ok(out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let tape = Tape::new();
    let ctx = ForwardCtx::new(&tape, opts.mode);
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = forward(module, &ctx, &vars)?;
    let mut rng = seeded_rng(opts.seed, 0x9c);
    let weights = Tensor::from_fn(&out.shape(), |_| rng.random_range(-1.0..1.0));
    let l = ops::sum_all(ops::mul(out, tape.constant(weights.clone()))?);
    let grads = tape.backward(l)?;
    let sign = if opts.wrong_sign { -1.0 } else { 1.0 };

    let mut worst = (0.0f64, String::new(), 0.0, 0.0);
    let mut checked = 0;
    let mut record = |what: String, a: f64, n: f64| {
        checked += 1;
        let e = rel_error(sign * a, n);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, what, sign * a, n);
        }
    };

    let mut work = inputs.to_vec();
    for (ii, v) in vars.iter().enumerate() {
        let analytic = grads.of_or_zeros(*v);
        for e in 0..work[ii].numel() {
            let orig = work[ii].data()[e];
            work[ii].data_mut()[e] = orig + opts.step;
            let up = loss(module, &work, &weights)?;
            work[ii].data_mut()[e] = orig - opts.step;
            let down = loss(module, &work, &weights)?;
            work[ii].data_mut()[e] = orig;
            record(format!("input{ii}[{e}]"), analytic.data()[e], (up - down) / (2.0 * opts.step));
        }
    }

    let mut params: Vec<(String, Tensor<f64>)> = Vec::new();
    module.visit(&mut |p| {
        if p.trainable() {
            let g = grads.of_param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape()));
            params.push((p.name().to_owned(), g));
        }
    });
    for (pi, (name, analytic)) in params.iter().enumerate() {
        for e in 0..analytic.numel() {
            nudge(module, pi, e, opts.step);
            let up = loss(module, inputs, &weights)?;
            nudge(module, pi, e, -2.0 * opts.step);
            let down = loss(module, inputs, &weights)?;
            nudge(module, pi, e, opts.step);
            record(format!("{name}[{e}]"), analytic.data()[e], (up - down) / (2.0 * opts.step));
        }
    }

    let (max_rel_error, worst, analytic, numeric) = worst;
    Ok(GradReport {
        case: case.to_owned(),
        shape: inputs.first().map(|t| t.shape().to_vec()).unwrap_or_default(),
        checked,
        max_rel_error,
        worst,
        analytic,
        numeric,
        tolerance: opts.tolerance,
        passed: max_rel_error <= opts.tolerance,
    })
}

/// Replaces every trainable parameter with random values so that no
/// zero-initialized layer hides gradient paths.
pub fn randomize<M: Module<f64>>(module: &mut M, rng: &mut ChaCha8Rng) {
    module.visit_mut(&mut |p| {
        if !p.trainable() {
            return;
        }
        let shape = p.value().shape().to_vec();
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        let bound = if p.name().ends_with(".gamma") { None } else { Some(1.0 / (fan_in as f64).sqrt()) };
        p.set(Tensor::from_fn(&shape, |_| match bound {
            Some(b) => rng.random_range(-b..b),
            None => rng.random_range(0.5..1.5),
        }));
    });
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Case names accepted by [`run_case`]: primitives, every operator at
/// `1 x 16 x 5 x 5` with `k = 3`, and block composites.
pub fn case_names() -> Vec<String> {
    let mut v: Vec<String> = [
        "linear", "batch_norm", "relu", "max_pool", "global_avg_pool", "softmax", "log_softmax", "unfold",
        "hadamard_grouped", "slot_gram", "concat", "swap_adjacent", "sum_axis", "broadcast_slots", "conv2d",
    ]
    .iter()
    .map(|s| format!("op/{s}"))
    .collect();
    v.extend(sweep_operators().iter().map(Operator::name));
    v.extend(
        ["block/sa_pairwise", "block/sa_patchwise", "block/bottleneck", "block/bottleneck_strided", "block/transition"]
            .map(String::from),
    );
    v
}

fn operator_by_name(name: &str) -> Option<Operator> {
    sweep_operators().into_iter().find(|o| o.name() == name)
}

/// Runs one named case.
pub fn run_case(name: &str, opts: Options) -> Result<GradReport> {
    let mut rng = seeded_rng(opts.seed, 1);
    let x = random(&[1, 16, 5, 5], &mut rng);
    if let Some(op) = operator_by_name(name) {
        let mut module = AttentionOp::<f64>::new("op", 16, 3, small_config(op), &mut rng)?;
        return check(name, &mut module, &[x], |m, ctx, v| m.forward(ctx, v[0]), opts);
    }
    let small = |r: &mut ChaCha8Rng, s: &[usize]| random(s, r);
    let fp3 = FootprintSpec::same(3)?;
    let simple = |name: &str, inputs: Vec<Tensor<f64>>, f: &dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>| {
        check(name, &mut NoParams, &inputs, |_, _, v| f(v), opts)
    };
    match name {
        "op/linear" => {
            let inputs = vec![small(&mut rng, &[2, 4, 3, 3]), small(&mut rng, &[5, 4]), small(&mut rng, &[5])];
            simple(name, inputs, &|v| ops::linear(v[0], v[1], Some(v[2])))
        }
        "op/batch_norm" => {
            let inputs = vec![small(&mut rng, &[3, 4, 2, 2]), small(&mut rng, &[4]), small(&mut rng, &[4])];
            simple(name, inputs, &|v| Ok(ops::batch_norm_train(v[0], v[1], v[2], 1e-5)?.0))
        }
        "op/relu" => simple(name, vec![small(&mut rng, &[2, 3, 4])], &|v| Ok(ops::relu(v[0]))),
        "op/max_pool" => simple(name, vec![small(&mut rng, &[1, 2, 4, 4])], &|v| ops::max_pool2d(v[0], 2, 2, 0)),
        "op/global_avg_pool" => simple(name, vec![small(&mut rng, &[2, 3, 3, 3])], &|v| ops::global_avg_pool(v[0])),
        "op/softmax" => simple(name, vec![small(&mut rng, &[2, 5, 3])], &|v| ops::softmax(v[0], 1)),
        "op/log_softmax" => simple(name, vec![small(&mut rng, &[2, 5, 3])], &|v| ops::log_softmax(v[0], 1)),
        "op/unfold" => simple(name, vec![small(&mut rng, &[1, 2, 4, 4])], &|v| ops::unfold(v[0], &fp3)),
        "op/hadamard_grouped" => {
            let inputs = vec![small(&mut rng, &[1, 2, 3, 4]), small(&mut rng, &[1, 6, 3, 4])];
            simple(name, inputs, &|v| ops::hadamard_grouped(v[0], v[1]))
        }
        "op/slot_gram" => {
            let inputs = vec![small(&mut rng, &[1, 2, 4, 3]), small(&mut rng, &[1, 2, 4, 3])];
            simple(name, inputs, &|v| ops::slot_gram(v[0], v[1]))
        }
        "op/concat" => {
            let inputs = vec![small(&mut rng, &[2, 1, 3]), small(&mut rng, &[2, 2, 3])];
            simple(name, inputs, &|v| ops::concat(&[v[0], v[1]], 1))
        }
        "op/swap_adjacent" => simple(name, vec![small(&mut rng, &[2, 3, 4, 2])], &|v| ops::swap_adjacent(v[0], 1)),
        "op/sum_axis" => simple(name, vec![small(&mut rng, &[2, 3, 4])], &|v| ops::sum_axis(v[0], 1, false)),
        "op/broadcast_slots" => simple(name, vec![small(&mut rng, &[2, 3, 4])], &|v| ops::broadcast_slots(v[0], 3)),
        "op/conv2d" => {
            let inputs = vec![small(&mut rng, &[1, 3, 5, 5]), small(&mut rng, &[4, 3, 3, 3])];
            let fp = FootprintSpec::strided(3, 2)?;
            simple(name, inputs, &|v| ops::conv2d(v[0], v[1], &fp))
        }
        "block/sa_pairwise" | "block/sa_patchwise" => {
            let cfg = if name.ends_with("pairwise") {
                AttentionConfig::pairwise(PairwiseRelation::Subtraction)
            } else {
                AttentionConfig::patchwise(PatchRelation::Concatenation)
            };
            let mut block = SABlock::<f64>::new("block", 16, 3, cfg.with_reductions(4, 2, 2), &mut rng)?;
            randomize(&mut block, &mut rng);
            check(name, &mut block, &[x], |m, ctx, v| m.forward(ctx, v[0]), opts)
        }
        "block/bottleneck" | "block/bottleneck_strided" => {
            let (width, stride, shape) = if name.ends_with("strided") { (8, 2, [1, 16, 4, 4]) } else { (4, 1, [1, 16, 5, 5]) };
            let mut block = Bottleneck::<f64>::new("block", 16, width, stride, &mut rng)?;
            randomize(&mut block, &mut rng);
            let x = random(&shape, &mut rng);
            check(name, &mut block, &[x], |m, ctx, v| m.forward(ctx, v[0]), opts)
        }
        "block/transition" => {
            let mut t = Transition::<f64>::new("t", 16, 32, true, &mut rng);
            randomize(&mut t, &mut rng);
            let x = random(&[1, 16, 4, 4], &mut rng);
            check(name, &mut t, &[x], |m, ctx, v| m.forward(ctx, v[0]), opts)
        }
        _ => Err(crate::error::Error::Usage(format!("unknown gradient case '{name}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_exact_gradient() {
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let r = check("sq", &mut NoParams, &[x], |_, _, v| ops::mul(v[0], v[0]), Options::default()).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_sign_is_detected() {
        let opts = Options { wrong_sign: true, ..Options::default() };
        let r = run_case("op/linear", opts).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 1.0);
    }

    #[test]
    fn unknown_case_is_usage_error() {
        assert!(run_case("op/nope", Options::default()).is_err());
    }

    #[test]
    fn all_cases_named_uniquely() {
        let names = case_names();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
    }
}
