//! Closed-form parameter and multiply-accumulate counts.
//!
//! One MAC is one multiply-add. Linear maps and convolutions cost
//! `Cin * Cout * k^2` per output location. Attention adds its relation
//! products, the weight-mapping perceptron (per slot for pairwise, per
//! location for patchwise) and `K * Cm` for aggregation. Batch norm, ReLU,
//! pooling and softmax are free.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::attention::{AttentionConfig, Operator, Sharing};
use crate::error::Result;
use crate::models::{build, layer_key, Architecture, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub input_hw: usize,
    pub params: u64,
    pub macs: u64,
    pub breakdown: Vec<LayerCost>,
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn macs_g(&self) -> f64 {
        self.macs as f64 / 1e9
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>14} {:>16}", "layer", "params", "macs")?;
        for l in &self.breakdown {
            writeln!(f, "{:<24} {:>14} {:>16}", l.name, l.params, l.macs)?;
        }
        writeln!(f, "{:<24} {:>14} {:>16}", "total", self.params, self.macs)?;
        write!(f, "{} @ {}px: {:.2}M params, {:.2}G MACs", self.model, self.input_hw, self.params_m(), self.macs_g())
    }
}

fn linear(cin: usize, cout: usize, bias: bool) -> u64 {
    (cin * cout + if bias { cout } else { 0 }) as u64
}

fn bn(c: usize) -> u64 {
    2 * c as u64
}

/// Parameters of one attention operator at input width `c`.
pub fn attention_params(cfg: &AttentionConfig, c: usize, k: usize) -> Result<u64> {
    let w = cfg.widths(c)?;
    if cfg.operator == Operator::Conv {
        return Ok((w.cm * c * k * k) as u64);
    }
    let mut p = linear(c, w.d, true);
    if cfg.sharing == Sharing::Distinct {
        p += linear(c, w.d, true);
    }
    if cfg.sharing != Sharing::All {
        p += linear(c, w.cm, false);
    }
    if cfg.uses_position() {
        p += linear(2, 2, true);
    }
    p += gamma_params(&cfg.gamma_widths(c, k)?);
    Ok(p)
}

/// Weights plus biases of a perceptron with the given layer widths.
pub fn gamma_params(widths: &[usize]) -> u64 {
    widths.windows(2).map(|w| linear(w[0], w[1], true)).sum()
}

fn gamma_macs(widths: &[usize]) -> u64 {
    widths.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

/// MACs of one attention operator per output location.
pub fn attention_macs_per_location(cfg: &AttentionConfig, c: usize, k: usize) -> Result<u64> {
    let w = cfg.widths(c)?;
    let slots = (k * k) as u64;
    let (d, cm) = (w.d as u64, w.cm as u64);
    let c = c as u64;
    if cfg.operator == Operator::Conv {
        return Ok(c * cm * slots);
    }
    let mut m = c * d;
    if cfg.sharing == Sharing::Distinct {
        m += c * d;
    }
    if cfg.sharing != Sharing::All {
        m += c * cm;
    }
    let gamma = gamma_macs(&cfg.gamma_widths(c as usize, k)?);
    m += match cfg.operator {
        Operator::Pairwise { relation, .. } => {
            let pos = if cfg.uses_position() { 4 } else { 0 };
            pos + slots * (relation.macs(w.d) + gamma)
        }
        Operator::Patchwise { relation } => relation.macs(w.d, k * k) + gamma,
        Operator::Scalar { .. } => slots * d,
        Operator::Conv => unreachable!(),
    };
    Ok(m + slots * cm)
}

fn sa_block(cfg: &AttentionConfig, c: usize, k: usize, hw: usize) -> Result<(u64, u64)> {
    let cm = cfg.widths(c)?.cm;
    let params = bn(c) + attention_params(cfg, c, k)? + bn(cm) + linear(cm, c, true);
    let macs = (attention_macs_per_location(cfg, c, k)? + (cm * c) as u64) * (hw * hw) as u64;
    Ok((params, macs))
}

fn conv_extent(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Symbolic parameter and MAC counts for `spec` at its input size.
pub fn count(spec: &ModelSpec) -> Result<CostReport> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut push = |name: String, params: u64, macs: u64| rows.push(LayerCost { name, params, macs });
    let mut hw = spec.input_hw;
    let width = match &spec.arch {
        Architecture::San { stem_channels, stages, attention } => {
            let c0 = *stem_channels;
            push("stem".into(), linear(spec.in_channels, c0, true), (spec.in_channels * c0 * hw * hw) as u64);
            let mut cin = c0;
            for (i, s) in stages.iter().enumerate() {
                if s.pool {
                    hw /= 2;
                }
                push(
                    format!("stage{i}.transition"),
                    bn(cin) + linear(cin, s.channels, true),
                    (cin * s.channels * hw * hw) as u64,
                );
                for b in 0..s.blocks {
                    let (p, m) = sa_block(attention, s.channels, s.footprint, hw)?;
                    push(format!("stage{i}.block{b}"), p, m);
                }
                cin = s.channels;
            }
            cin
        }
        Architecture::Resnet { stem_channels, stages } => {
            let c0 = *stem_channels;
            let out = conv_extent(hw, 7, 2, 3);
            push("stem".into(), (spec.in_channels * c0 * 49) as u64 + bn(c0), (spec.in_channels * c0 * 49 * out * out) as u64);
            hw = conv_extent(out, 3, 2, 1);
            let mut cin = c0;
            for (i, s) in stages.iter().enumerate() {
                let cout = 4 * s.width;
                for b in 0..s.blocks {
                    let stride = if b == 0 { s.stride } else { 1 };
                    let ho = conv_extent(hw, 3, stride, 1);
                    let (hw2, ho2) = ((hw * hw) as u64, (ho * ho) as u64);
                    let w = s.width;
                    let mut p = bn(cin) + linear(cin, w, false) + bn(w) + (9 * w * w) as u64 + bn(w) + linear(w, cout, false);
                    let mut m = (cin * w) as u64 * hw2 + (9 * w * w) as u64 * ho2 + (w * cout) as u64 * ho2;
                    if stride != 1 || cin != cout {
                        p += linear(cin, cout, false);
                        m += (cin * cout) as u64 * ho2;
                    }
                    push(format!("stage{i}.block{b}"), p, m);
                    cin = cout;
                    hw = ho;
                }
            }
            cin
        }
    };
    push("head".into(), bn(width) + linear(width, spec.classes, true), (width * spec.classes) as u64);
    Ok(CostReport {
        model: spec.name.clone(),
        input_hw: spec.input_hw,
        params: rows.iter().map(|r| r.params).sum(),
        macs: rows.iter().map(|r| r.macs).sum(),
        breakdown: rows,
    })
}

pub fn count_params(spec: &ModelSpec) -> Result<u64> {
    Ok(count(spec)?.params)
}

pub fn count_macs(spec: &ModelSpec) -> Result<u64> {
    Ok(count(spec)?.macs)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerMismatch {
    pub layer: String,
    pub symbolic: u64,
    pub runtime: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RuntimeCheck {
    pub model: String,
    pub symbolic: u64,
    pub runtime: u64,
    pub mismatches: Vec<LayerMismatch>,
}

impl RuntimeCheck {
    pub fn matches(&self) -> bool {
        self.symbolic == self.runtime && self.mismatches.is_empty()
    }
}

/// Builds the model and compares allocated trainable scalars with the
/// symbolic count, layer by layer.
pub fn verify_against_runtime(spec: &ModelSpec) -> Result<RuntimeCheck> {
    let report = count(spec)?;
    let model = build::<f32>(spec, 0)?;
    let mut runtime: BTreeMap<String, u64> = BTreeMap::new();
    for p in model.params().into_iter().filter(|p| p.trainable()) {
        *runtime.entry(layer_key(p.name())).or_default() += p.numel() as u64;
    }
    let symbolic: BTreeMap<String, u64> = report.breakdown.iter().map(|l| (l.name.clone(), l.params)).collect();
    let mut mismatches = Vec::new();
    for key in symbolic.keys().chain(runtime.keys()).collect::<std::collections::BTreeSet<_>>() {
        let (s, r) = (symbolic.get(key).copied().unwrap_or(0), runtime.get(key).copied().unwrap_or(0));
        if s != r {
            mismatches.push(LayerMismatch { layer: key.clone(), symbolic: s, runtime: r });
        }
    }
    Ok(RuntimeCheck {
        model: spec.name.clone(),
        symbolic: report.params,
        runtime: runtime.values().sum(),
        mismatches,
    })
}

/// All ResNet stage distributions (each stage between 1 and `max` blocks)
/// whose parameter count lies within `tol` (relative) of `target`.
pub fn search_resnet_stages(target: f64, tol: f64, max: usize) -> Result<Vec<([usize; 4], u64)>> {
    let mut hits = Vec::new();
    for a in 1..=max {
        for b in 1..=max {
            for c in 1..=max {
                for d in 1..=max {
                    let blocks = [a, b, c, d];
                    let p = count_params(&ModelSpec::resnet("search", blocks))?;
                    if ((p as f64 - target) / target).abs() <= tol {
                        hits.push((blocks, p));
                    }
                }
            }
        }
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PairwiseRelation;
    use crate::models::SanStage;

    #[test]
    fn breakdown_sums_to_total() {
        let r = count(&ModelSpec::preset("san10", None).unwrap()).unwrap();
        assert_eq!(r.params, r.breakdown.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.macs, r.breakdown.iter().map(|l| l.macs).sum::<u64>());
    }

    #[test]
    fn zero_stage_model_is_stem_plus_head() {
        let mut spec = ModelSpec::preset("san10", None).unwrap();
        if let Architecture::San { stages, .. } = &mut spec.arch {
            stages.clear();
        }
        let r = count(&spec).unwrap();
        assert_eq!(r.macs, 3 * 64 * 224 * 224 + 64 * 1000);
    }

    #[test]
    fn stage_one_pairwise_gamma() {
        // 2 relative-position channels join the 4-wide subtraction
        let cfg = AttentionConfig::pairwise(PairwiseRelation::Subtraction);
        let widths = cfg.gamma_widths(64, 3).unwrap();
        assert_eq!(gamma_params(&widths), (4 + 2) * 4 + 4 * 2 + 4 + 2);
    }

    #[test]
    fn macs_scale_quadratically_without_pooling() {
        let mut spec = ModelSpec::preset("san-tiny", None).unwrap();
        if let Architecture::San { stages, .. } = &mut spec.arch {
            stages.iter_mut().for_each(|s: &mut SanStage| s.pool = false);
        }
        let head = 64 * 10;
        let small = count(&spec).unwrap().macs - head;
        spec.input_hw *= 2;
        let large = count(&spec).unwrap().macs - head;
        assert_eq!(large, 4 * small);
    }
}
