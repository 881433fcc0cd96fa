//! Parameter containers and the two leaf layers (pointwise linear and batch
//! normalization) that every composite module is built from.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::ops;
use crate::tensor::{Real, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A named tensor owned by a module. Non-trainable params hold state such as
/// batch-norm running statistics; they are serialized but never optimized.
#[derive(Debug)]
pub struct Param<T> {
    id: ParamId,
    name: String,
    trainable: bool,
    value: Arc<Tensor<T>>,
}

impl<T: Real> Clone for Param<T> {
    /// Clones get a fresh identity so two models never share tape bindings.
    fn clone(&self) -> Self {
        Self::with_flag(&self.name, (*self.value).clone(), self.trainable)
    }
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self::with_flag(name, value, true)
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self::with_flag(name, value, false)
    }

    fn with_flag(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            trainable,
            value: Arc::new(value),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn value_arc(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }

    /// Mutable access; copies only if a live tape still holds the value.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor<T>) {
        self.value = Arc::new(value);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Var<'t, T> {
        tape.param(self)
    }
}

/// Anything that owns parameters, enumerated in declaration order.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable() {
                n += p.numel();
            }
        });
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
}

/// Per-forward context: the tape, the mode and the running-stat updates
/// collected in training mode. Modules stay immutable during forward; the
/// caller commits updates with [`commit_stat_updates`].
pub struct ForwardCtx<'t, T: Real> {
    pub tape: &'t Tape<T>,
    pub mode: Mode,
    updates: RefCell<Vec<StatUpdate<T>>>,
}

impl<'t, T: Real> ForwardCtx<'t, T> {
    pub fn new(tape: &'t Tape<T>, mode: Mode) -> Self {
        Self { tape, mode, updates: RefCell::new(Vec::new()) }
    }

    pub fn train(tape: &'t Tape<T>) -> Self {
        Self::new(tape, Mode::Train)
    }

    pub fn eval(tape: &'t Tape<T>) -> Self {
        Self::new(tape, Mode::Eval)
    }

    pub fn take_updates(&self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }
}

/// Blends collected batch statistics into the matching running buffers.
pub fn commit_stat_updates<T: Real, M: Module<T> + ?Sized>(module: &mut M, updates: &[StatUpdate<T>]) {
    if updates.is_empty() {
        return;
    }
    let mut by_id = std::collections::HashMap::new();
    for u in updates {
        by_id.insert(u.mean_id, (&u.mean, u.momentum));
        by_id.insert(u.var_id, (&u.var, u.momentum));
    }
    module.visit_mut(&mut |p| {
        if let Some((stat, momentum)) = by_id.get(&p.id()) {
            let m = T::of(*momentum);
            for (r, s) in p.value_mut().data_mut().iter_mut().zip(stat.data()) {
                *r = (T::one() - m) * *r + m * *s;
            }
        }
    });
}

/// Kaiming-uniform fan-in initialization: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// Pointwise (1x1) linear map over the channel axis of `[N, C, ...]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            kaiming_uniform(&[out_features, in_features], in_features, rng),
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_features])));
        Self { weight, bias }
    }

    /// All-zero weights (and bias).
    pub fn zeroed(name: &str, in_features: usize, out_features: usize, bias: bool) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[out_features, in_features])),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Tensor::zeros(&[out_features]))),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().dim(0)
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = self.weight.bind(ctx.tape);
        let b = self.bias.as_ref().map(|b| b.bind(ctx.tape));
        ops::linear(x, w, b)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let gamma = self.gamma.bind(ctx.tape);
        let beta = self.beta.bind(ctx.tape);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ops::batch_norm_train(x, gamma, beta, self.eps)?;
                ctx.updates.borrow_mut().push(StatUpdate {
                    mean_id: self.running_mean.id(),
                    var_id: self.running_var.id(),
                    mean: stats.mean,
                    var: stats.unbiased_var,
                    momentum: self.momentum,
                });
                Ok(y)
            }
            Mode::Eval => ops::batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.value(),
                self.running_var.value(),
                self.eps,
            ),
        }
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Deterministic generator for a component, derived from a seed and a label.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
