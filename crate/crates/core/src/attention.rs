//! Local vector self-attention operators and their convolutional sibling.
//!
//! Every operator maps `[N, C, H, W]` to `[N, Cm, H, W]` with `Cm = C / r2`.
//! Neighborhoods come from [`ops::unfold`], so padded slots carry zero
//! features and contribute nothing to the aggregation because the value
//! transform `beta` has no bias.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{config_err, dim_err, Result};
use crate::nn::{kaiming_uniform, ForwardCtx, Linear, Module, Param};
use crate::ops::{self, FootprintSpec};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseRelation {
    Summation,
    Subtraction,
    Concatenation,
    Hadamard,
    Dot,
}

impl PairwiseRelation {
    pub const ALL: [PairwiseRelation; 5] = [
        PairwiseRelation::Summation,
        PairwiseRelation::Subtraction,
        PairwiseRelation::Concatenation,
        PairwiseRelation::Hadamard,
        PairwiseRelation::Dot,
    ];

    /// Width of the relation output for features of width `d`.
    pub fn output_dim(self, d: usize) -> usize {
        match self {
            Self::Summation | Self::Subtraction | Self::Hadamard => d,
            Self::Concatenation => 2 * d,
            Self::Dot => 1,
        }
    }

    /// Multiplies per slot spent combining two width-`d` features.
    pub fn macs(self, d: usize) -> u64 {
        match self {
            Self::Hadamard | Self::Dot => d as u64,
            Self::Summation | Self::Subtraction | Self::Concatenation => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchRelation {
    StarProduct,
    CliqueProduct,
    Concatenation,
}

impl PatchRelation {
    pub const ALL: [PatchRelation; 3] =
        [PatchRelation::StarProduct, PatchRelation::CliqueProduct, PatchRelation::Concatenation];

    /// Width of the relation output over `slots` neighbors.
    pub fn output_dim(self, d: usize, slots: usize) -> usize {
        match self {
            Self::StarProduct => slots,
            Self::CliqueProduct => slots * slots,
            Self::Concatenation => (slots + 1) * d,
        }
    }

    /// Multiplies per location spent building the relation vector.
    pub fn macs(self, d: usize, slots: usize) -> u64 {
        match self {
            Self::StarProduct => (slots * d) as u64,
            Self::CliqueProduct => (slots * slots * d) as u64,
            Self::Concatenation => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    None,
    Absolute,
    #[default]
    Relative,
}

impl PositionMode {
    pub const ALL: [PositionMode; 3] = [PositionMode::None, PositionMode::Absolute, PositionMode::Relative];

    pub fn channels(self) -> usize {
        match self {
            Self::None => 0,
            Self::Absolute | Self::Relative => 2,
        }
    }
}

/// Which of the three feature transforms reuse the same weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    #[default]
    Distinct,
    /// `psi` reuses `phi`.
    PhiPsi,
    /// `psi` and `beta` reuse `phi`; needs `r1 == r2`.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "operator", rename_all = "snake_case")]
pub enum Operator {
    Pairwise { relation: PairwiseRelation, position: PositionMode },
    Patchwise { relation: PatchRelation },
    Scalar { normalize: bool },
    Conv,
}

impl Operator {
    pub fn name(&self) -> String {
        match self {
            Self::Pairwise { relation, position } => {
                format!("pairwise/{}/{}", snake(relation), snake(position))
            }
            Self::Patchwise { relation } => format!("patchwise/{}", snake(relation)),
            Self::Scalar { normalize: true } => "scalar/softmax".into(),
            Self::Scalar { normalize: false } => "scalar/plain".into(),
            Self::Conv => "conv".into(),
        }
    }
}

fn snake<S: Serialize>(v: &S) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// Full description of one attention operator instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    #[serde(flatten)]
    pub operator: Operator,
    pub gamma_depth: usize,
    pub r1: usize,
    pub r2: usize,
    pub share: usize,
    #[serde(default)]
    pub sharing: Sharing,
}

/// Channel widths implied by a config at input width `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    /// `phi`/`psi` output width.
    pub d: usize,
    /// Value width.
    pub cm: usize,
    /// Distinct weight components per slot, `cm / share`.
    pub groups: usize,
}

impl AttentionConfig {
    pub fn pairwise(relation: PairwiseRelation) -> Self {
        Self {
            operator: Operator::Pairwise { relation, position: PositionMode::Relative },
            gamma_depth: 2,
            r1: 16,
            r2: 4,
            share: 8,
            sharing: Sharing::Distinct,
        }
    }

    pub fn patchwise(relation: PatchRelation) -> Self {
        Self { operator: Operator::Patchwise { relation }, ..Self::pairwise(PairwiseRelation::Subtraction) }
    }

    pub fn with_reductions(mut self, r1: usize, r2: usize, share: usize) -> Self {
        self.r1 = r1;
        self.r2 = r2;
        self.share = share;
        self
    }

    pub fn widths(&self, c: usize) -> Result<Widths> {
        if self.r1 == 0 || self.r2 == 0 || self.share == 0 {
            return Err(config_err!("r1, r2 and share must be positive"));
        }
        if !c.is_multiple_of(self.r1) || !c.is_multiple_of(self.r2) {
            return Err(config_err!("channels {c} not divisible by r1={} and r2={}", self.r1, self.r2));
        }
        let (d, cm) = (c / self.r1, c / self.r2);
        if cm % self.share != 0 {
            return Err(config_err!("value width {cm} not divisible by share={}", self.share));
        }
        if !(1..=3).contains(&self.gamma_depth) {
            return Err(config_err!("gamma depth must be 1, 2 or 3, got {}", self.gamma_depth));
        }
        if self.sharing == Sharing::All && d != cm {
            return Err(config_err!("sharing all transforms needs r1 == r2 (d={d}, cm={cm})"));
        }
        Ok(Widths { d, cm, groups: cm / self.share })
    }

    /// Layer widths of the weight-mapping perceptron, input first. Empty for
    /// operators without one.
    ///
    /// Pairwise hidden layers have width `d`. Patchwise hidden layers narrow
    /// towards the per-slot output: one hidden layer has width `groups`, two
    /// hidden layers have widths `d` then `groups`.
    pub fn gamma_widths(&self, c: usize, k: usize) -> Result<Vec<usize>> {
        let w = self.widths(c)?;
        let slots = k * k;
        Ok(match self.operator {
            Operator::Pairwise { relation, position } => {
                let mut v = vec![relation.output_dim(w.d) + position.channels()];
                v.extend(std::iter::repeat_n(w.d, self.gamma_depth - 1));
                v.push(w.groups);
                v
            }
            Operator::Patchwise { relation } => {
                let mut v = vec![relation.output_dim(w.d, slots)];
                match self.gamma_depth {
                    1 => {}
                    2 => v.push(w.groups),
                    _ => v.extend([w.d, w.groups]),
                }
                v.push(slots * w.groups);
                v
            }
            Operator::Scalar { .. } | Operator::Conv => Vec::new(),
        })
    }

    pub fn uses_position(&self) -> bool {
        matches!(self.operator, Operator::Pairwise { position, .. } if position != PositionMode::None)
    }
}

/// Normalized pixel coordinates `[1, 2, H, W]`: channel 0 is the row, channel
/// 1 the column, each spaced evenly over `[-1, 1]`. A single-pixel axis maps
/// to 0.
pub fn normalized_coords<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let axis = |i: usize, n: usize| if n <= 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let mut data = Vec::with_capacity(2 * h * w);
    for y in 0..h {
        data.extend(std::iter::repeat_n(T::of(axis(y, h)), w));
    }
    for _ in 0..h {
        data.extend((0..w).map(|x| T::of(axis(x, w))));
    }
    Tensor::new(&[1, 2, h, w], data).expect("coordinate shape")
}

/// Position encoding `[1, 2, H, W]`: normalized coordinates mapped by the
/// trainable 2 -> 2 linear layer.
pub fn position_features<'t, T: Real>(
    ctx: &ForwardCtx<'t, T>,
    h: usize,
    w: usize,
    pos: &Linear<T>,
) -> Result<Var<'t, T>> {
    pos.forward(ctx, ctx.tape.constant(normalized_coords(h, w)))
}

/// Pairwise relation of `phi: [N, d, ..]` and `psi: [N, d, ..]`, output
/// `[N, dim, ..]` where `dim` follows [`PairwiseRelation::output_dim`].
pub fn delta_pairwise<'t, T: Real>(phi: Var<'t, T>, psi: Var<'t, T>, relation: PairwiseRelation) -> Result<Var<'t, T>> {
    if phi.shape() != psi.shape() {
        return Err(dim_err!("relation operands differ: {:?} vs {:?}", phi.shape(), psi.shape()));
    }
    match relation {
        PairwiseRelation::Summation => ops::add(phi, psi),
        PairwiseRelation::Subtraction => ops::sub(phi, psi),
        PairwiseRelation::Hadamard => ops::mul(phi, psi),
        PairwiseRelation::Concatenation => ops::concat(&[phi, psi], 1),
        PairwiseRelation::Dot => ops::sum_axis(ops::mul(phi, psi)?, 1, true),
    }
}

/// Patchwise relation for every location. `phi`, `phi_u`, `psi_u` are
/// `phi(x_i): [N, d, S..]` and the unfolded `phi(x_j)`, `psi(x_j)`:
/// `[N, d, K, S..]`. Output `[N, dim, S..]` with concatenation laid out
/// slot-major as `[phi_i, psi_j1, .., psi_jK]`.
pub fn delta_patchwise<'t, T: Real>(
    phi: Var<'t, T>,
    phi_u: Var<'t, T>,
    psi_u: Var<'t, T>,
    relation: PatchRelation,
) -> Result<Var<'t, T>> {
    let us = psi_u.shape();
    if us.len() < 3 || phi_u.shape() != us {
        return Err(dim_err!("patch relation expects matching [N, d, K, ..], got {us:?}"));
    }
    let (n, d, slots) = (us[0], us[1], us[2]);
    let rest = &us[3..];
    let with_rest = |head: &[usize]| [head, rest].concat();
    match relation {
        PatchRelation::StarProduct => {
            let prod = ops::mul(ops::broadcast_slots(phi, slots)?, psi_u)?;
            ops::reshape(ops::sum_axis(prod, 1, false)?, &with_rest(&[n, slots]))
        }
        PatchRelation::CliqueProduct => ops::slot_gram(phi_u, psi_u),
        PatchRelation::Concatenation => {
            let centre = ops::reshape(phi, &with_rest(&[n, d, 1]))?;
            let joined = ops::swap_adjacent(ops::concat(&[centre, psi_u], 2)?, 1)?;
            ops::reshape(joined, &with_rest(&[n, (slots + 1) * d]))
        }
    }
}

/// Linear layers separated by ReLU.
#[derive(Debug, Clone)]
pub struct Gamma<T: Real> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Gamma<T> {
    pub fn new(name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, mut v: Var<'t, T>) -> Result<Var<'t, T>> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                v = ops::relu(v);
            }
            v = layer.forward(ctx, v)?;
        }
        Ok(v)
    }

    /// Makes the map constant: every layer but the last keeps its weights, the
    /// last one emits `bias` regardless of input.
    pub fn set_constant(&mut self, bias: Tensor<T>) -> Result<()> {
        let last = self.layers.last_mut().ok_or_else(|| config_err!("gamma without layers"))?;
        let out = last.out_features();
        if bias.shape() != [out] {
            return Err(dim_err!("constant gamma output {:?} for width {out}", bias.shape()));
        }
        let inp = last.in_features();
        last.weight.set(Tensor::zeros(&[out, inp]));
        match &mut last.bias {
            Some(b) => b.set(bias),
            None => return Err(config_err!("gamma output layer has no bias")),
        }
        Ok(())
    }
}

impl<T: Real> Module<T> for Gamma<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// One attention (or convolution) operator with its parameters.
#[derive(Debug, Clone)]
pub struct AttentionOp<T: Real> {
    pub config: AttentionConfig,
    pub footprint: FootprintSpec,
    pub widths: Widths,
    pub phi: Option<Linear<T>>,
    pub psi: Option<Linear<T>>,
    pub beta: Option<Linear<T>>,
    pub position: Option<Linear<T>>,
    pub gamma: Option<Gamma<T>>,
    /// Convolution kernel `[Cm, C, k, k]`.
    pub kernel: Option<Param<T>>,
}

impl<T: Real> AttentionOp<T> {
    pub fn new(name: &str, channels: usize, k: usize, config: AttentionConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let widths = config.widths(channels)?;
        let footprint = FootprintSpec::same(k)?;
        let Widths { d, cm, .. } = widths;
        let mut op = Self {
            config,
            footprint,
            widths,
            phi: None,
            psi: None,
            beta: None,
            position: None,
            gamma: None,
            kernel: None,
        };
        if config.operator == Operator::Conv {
            let fan_in = channels * k * k;
            op.kernel = Some(Param::new(format!("{name}.kernel"), kaiming_uniform(&[cm, channels, k, k], fan_in, rng)));
            return Ok(op);
        }
        op.phi = Some(Linear::new(&format!("{name}.phi"), channels, d, true, rng));
        if config.sharing == Sharing::Distinct {
            op.psi = Some(Linear::new(&format!("{name}.psi"), channels, d, true, rng));
        }
        if config.sharing != Sharing::All {
            op.beta = Some(Linear::new(&format!("{name}.beta"), channels, cm, false, rng));
        }
        if config.uses_position() {
            op.position = Some(Linear::new(&format!("{name}.pos"), 2, 2, true, rng));
        }
        let gw = config.gamma_widths(channels, k)?;
        if !gw.is_empty() {
            op.gamma = Some(Gamma::new(&format!("{name}.gamma"), &gw, rng));
        }
        Ok(op)
    }

    pub fn out_channels(&self) -> usize {
        self.widths.cm
    }

    fn phi_layer(&self) -> &Linear<T> {
        self.phi.as_ref().expect("attention operator has phi")
    }

    fn psi_layer(&self) -> &Linear<T> {
        self.psi.as_ref().unwrap_or_else(|| self.phi_layer())
    }

    fn beta_layer(&self) -> &Linear<T> {
        self.beta.as_ref().unwrap_or_else(|| self.phi_layer())
    }

    /// `[N, C, H, W] -> [N, Cm, H, W]`.
    pub fn forward<'t>(&self, ctx: &ForwardCtx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_with_slot_order(ctx, x, None)
    }

    /// Forward pass with the footprint slots enumerated in `order` instead of
    /// row-major. Pairwise and scalar outputs do not depend on the order.
    pub fn forward_with_slot_order<'t>(
        &self,
        ctx: &ForwardCtx<'t, T>,
        x: Var<'t, T>,
        order: Option<&[usize]>,
    ) -> Result<Var<'t, T>> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(dim_err!("attention expects [N, C, H, W], got {xs:?}"));
        }
        let fp = &self.footprint;
        if let Some(kernel) = &self.kernel {
            return ops::conv2d(x, kernel.bind(ctx.tape), fp);
        }
        let (n, h, w) = (xs[0], xs[2], xs[3]);
        let slots = fp.slots();
        let phi = self.phi_layer().forward(ctx, x)?;
        let psi = if self.psi.is_some() { self.psi_layer().forward(ctx, x)? } else { phi };
        let beta = if self.beta.is_some() { self.beta_layer().forward(ctx, x)? } else { phi };
        let unfold = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            let u = ops::unfold(v, fp)?;
            match order {
                Some(o) => ops::permute_axis(u, 2, o),
                None => Ok(u),
            }
        };
        let psi_u = unfold(psi)?;
        let beta_u = unfold(beta)?;
        let weights = match self.config.operator {
            Operator::Pairwise { relation, position } => {
                let mut delta = delta_pairwise(ops::broadcast_slots(phi, slots)?, psi_u, relation)?;
                if let Some(pos_layer) = &self.position {
                    let p = position_features(ctx, h, w, pos_layer)?;
                    let p_u = unfold(p)?;
                    let enc = match position {
                        PositionMode::Relative => ops::sub(ops::broadcast_slots(p, slots)?, p_u)?,
                        _ => p_u,
                    };
                    delta = ops::concat(&[delta, ops::expand_batch(enc, n)?], 1)?;
                }
                self.gamma.as_ref().expect("pairwise gamma").forward(ctx, delta)?
            }
            Operator::Patchwise { relation } => {
                let phi_u = if relation == PatchRelation::CliqueProduct { unfold(phi)? } else { psi_u };
                let delta = delta_patchwise(phi, phi_u, psi_u, relation)?;
                let out = self.gamma.as_ref().expect("patchwise gamma").forward(ctx, delta)?;
                let g = self.widths.groups;
                ops::swap_adjacent(ops::reshape(out, &[n, slots, g, h, w])?, 1)?
            }
            Operator::Scalar { normalize } => {
                let logits = delta_pairwise(ops::broadcast_slots(phi, slots)?, psi_u, PairwiseRelation::Dot)?;
                if normalize {
                    ops::softmax(logits, 2)?
                } else {
                    logits
                }
            }
            Operator::Conv => unreachable!("handled above"),
        };
        ops::sum_axis(ops::hadamard_grouped(weights, beta_u)?, 2, false)
    }
}

impl<T: Real> Module<T> for AttentionOp<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for l in [&self.phi, &self.psi, &self.beta, &self.position].into_iter().flatten() {
            l.visit(f);
        }
        if let Some(g) = &self.gamma {
            g.visit(f);
        }
        if let Some(k) = &self.kernel {
            f(k);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for l in [&mut self.phi, &mut self.psi, &mut self.beta, &mut self.position].into_iter().flatten() {
            l.visit_mut(f);
        }
        if let Some(g) = &mut self.gamma {
            g.visit_mut(f);
        }
        if let Some(k) = &mut self.kernel {
            f(k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::seeded_rng;

    fn vec_var<'t>(tape: &'t Tape<f64>, v: &[f64]) -> Var<'t, f64> {
        tape.constant(Tensor::from_f64(&[1, v.len()], v).unwrap())
    }

    #[test]
    fn single_pixel_coords_are_zero() {
        assert_eq!(normalized_coords::<f64>(1, 1).data(), &[0.0, 0.0]);
    }

    #[test]
    fn corner_coords_hit_endpoints() {
        let c = normalized_coords::<f64>(3, 3);
        assert_eq!((c.at(&[0, 0, 0, 0]), c.at(&[0, 1, 0, 0])), (-1.0, -1.0));
        assert_eq!((c.at(&[0, 0, 2, 2]), c.at(&[0, 1, 2, 2])), (1.0, 1.0));
    }

    #[test]
    fn five_rows_match_linspace() {
        let c = normalized_coords::<f64>(5, 1);
        let rows: Vec<f64> = (0..5).map(|y| c.at(&[0, 0, y, 0])).collect();
        let linspace: Vec<f64> = (0..5).map(|i| -1.0 + 0.5 * i as f64).collect();
        assert_eq!(rows, linspace);
    }

    #[test]
    fn identity_position_layer_returns_coords() {
        let tape = Tape::<f64>::new();
        let ctx = ForwardCtx::eval(&tape);
        let mut pos = Linear::zeroed("pos", 2, 2, true);
        pos.weight.set(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let p = position_features(&ctx, 3, 3, &pos).unwrap().value();
        assert_eq!(*p, normalized_coords(3, 3));
    }

    #[test]
    fn subtraction_of_equal_features_is_zero() {
        let tape = Tape::<f64>::new();
        let a = vec_var(&tape, &[1.0, -2.0, 3.0]);
        let y = delta_pairwise(a, a, PairwiseRelation::Subtraction).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dot_is_a_single_scalar() {
        let tape = Tape::<f64>::new();
        let y = delta_pairwise(vec_var(&tape, &[1.0, 2.0]), vec_var(&tape, &[3.0, 4.0]), PairwiseRelation::Dot).unwrap();
        assert_eq!(y.value().data(), &[11.0]);
    }

    #[test]
    fn concatenation_stacks_phi_then_psi() {
        let tape = Tape::<f64>::new();
        let phi = vec_var(&tape, &[1.0, 2.0, 3.0, 4.0]);
        let psi = vec_var(&tape, &[5.0, 6.0, 7.0, 8.0]);
        let y = delta_pairwise(phi, psi, PairwiseRelation::Concatenation).unwrap();
        assert_eq!(y.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn star_product_with_zero_phi_is_zero() {
        let tape = Tape::<f64>::new();
        let phi = tape.constant(Tensor::zeros(&[1, 2, 1]));
        let psi_u = tape.constant(Tensor::from_fn(&[1, 2, 3, 1], |i| i as f64 + 1.0));
        let y = delta_patchwise(phi, psi_u, psi_u, PatchRelation::StarProduct).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn clique_product_orders_pairs_row_major() {
        // slots j, k in {0, 1}; phi = (c, d) = (5, 7), psi = (a, b) = (2, 3)
        let tape = Tape::<f64>::new();
        let phi_u = tape.constant(Tensor::from_f64(&[1, 1, 2, 1], &[5.0, 7.0]).unwrap());
        let psi_u = tape.constant(Tensor::from_f64(&[1, 1, 2, 1], &[2.0, 3.0]).unwrap());
        let phi = tape.constant(Tensor::zeros(&[1, 1, 1]));
        let y = delta_patchwise(phi, phi_u, psi_u, PatchRelation::CliqueProduct).unwrap();
        assert_eq!(y.value().data(), &[10.0, 15.0, 14.0, 21.0]);
    }

    #[test]
    fn patch_concatenation_width() {
        let tape = Tape::<f64>::new();
        let phi = tape.constant(Tensor::zeros(&[1, 16, 1, 1]));
        let psi_u = tape.constant(Tensor::zeros(&[1, 16, 49, 1, 1]));
        let y = delta_patchwise(phi, psi_u, psi_u, PatchRelation::Concatenation).unwrap();
        assert_eq!(y.shape(), vec![1, 800, 1, 1]);
        assert_eq!(PatchRelation::Concatenation.output_dim(16, 49), 800);
    }

    #[test]
    fn depth_one_identity_gamma_passes_through() {
        let tape = Tape::<f64>::new();
        let ctx = ForwardCtx::eval(&tape);
        let mut g = Gamma::<f64>::new("g", &[3, 3], &mut seeded_rng(0, 0));
        g.layers[0].weight.set(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let v = vec_var(&tape, &[0.5, -1.5, 2.0]);
        assert_eq!(g.forward(&ctx, v).unwrap().value().data(), v.value().data());
    }

    #[test]
    fn zero_last_layer_gives_zero_output() {
        let tape = Tape::<f64>::new();
        let ctx = ForwardCtx::eval(&tape);
        let mut g = Gamma::<f64>::new("g", &[6, 4, 2], &mut seeded_rng(0, 1));
        g.set_constant(Tensor::zeros(&[2])).unwrap();
        let v = vec_var(&tape, &[3.0, -1.0, 4.0, 1.0, -5.0, 9.0]);
        assert_eq!(g.forward(&ctx, v).unwrap().value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn divisibility_is_checked() {
        let cfg = AttentionConfig::pairwise(PairwiseRelation::Subtraction);
        assert!(cfg.widths(24).is_err());
        assert!(cfg.with_reductions(4, 2, 3).widths(16).is_err());
        assert_eq!(cfg.widths(64).unwrap(), Widths { d: 4, cm: 16, groups: 2 });
    }

    #[test]
    fn pairwise_gamma_widths_at_stage_one() {
        let cfg = AttentionConfig::pairwise(PairwiseRelation::Subtraction);
        assert_eq!(cfg.gamma_widths(64, 3).unwrap(), vec![6, 4, 2]);
    }

    fn single_slot_identity(config: AttentionConfig) {
        let mut op = AttentionOp::<f64>::new("a", 16, 1, config, &mut seeded_rng(3, 0)).unwrap();
        let ones = Tensor::ones(&[op.config.gamma_widths(16, 1).unwrap().last().copied().unwrap()]);
        op.gamma.as_mut().unwrap().set_constant(ones).unwrap();
        let x = Tensor::from_fn(&[2, 16, 3, 4], |i| ((i * 37) % 11) as f64 - 5.0);
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape);
        let y = op.forward(&ctx, tape.constant(x.clone())).unwrap().value();
        let b = op.beta.as_ref().unwrap().forward(&ctx, tape.constant(x)).unwrap().value();
        assert_eq!(*y, *b);
    }

    #[test]
    fn pairwise_single_slot_with_unit_weights_is_beta() {
        single_slot_identity(AttentionConfig::pairwise(PairwiseRelation::Subtraction).with_reductions(4, 2, 2));
    }

    #[test]
    fn patchwise_single_slot_with_unit_weights_is_beta() {
        single_slot_identity(AttentionConfig::patchwise(PatchRelation::Concatenation).with_reductions(4, 2, 2));
    }

    #[test]
    fn shared_transforms_drop_layers() {
        let mut cfg = AttentionConfig::pairwise(PairwiseRelation::Subtraction).with_reductions(4, 4, 2);
        cfg.sharing = Sharing::All;
        let op = AttentionOp::<f32>::new("a", 16, 3, cfg, &mut seeded_rng(0, 0)).unwrap();
        assert!(op.psi.is_none() && op.beta.is_none());
        cfg.r2 = 2;
        assert!(AttentionOp::<f32>::new("a", 16, 3, cfg, &mut seeded_rng(0, 0)).is_err());
    }

    #[test]
    fn uniform_softmax_averages_beta() {
        let cfg = AttentionConfig { operator: Operator::Scalar { normalize: true }, ..AttentionConfig::pairwise(PairwiseRelation::Dot) }
            .with_reductions(4, 2, 8);
        let mut op = AttentionOp::<f64>::new("a", 16, 3, cfg, &mut seeded_rng(5, 0)).unwrap();
        let phi = op.phi.as_mut().unwrap();
        phi.weight.set(Tensor::zeros(&[4, 16]));
        phi.bias.as_mut().unwrap().set(Tensor::zeros(&[4]));
        let x = Tensor::from_fn(&[1, 16, 3, 3], |i| (i as f64 * 0.37).sin());
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape);
        let y = op.forward(&ctx, tape.constant(x.clone())).unwrap().value();
        let b = op.beta.as_ref().unwrap().forward(&ctx, tape.constant(x)).unwrap().value();
        for c in 0..8 {
            let mean: f64 = (0..9).map(|s| b.at(&[0, c, s / 3, s % 3])).sum::<f64>() / 9.0;
            assert!((y.at(&[0, c, 1, 1]) - mean).abs() < 1e-12);
        }
    }
}
