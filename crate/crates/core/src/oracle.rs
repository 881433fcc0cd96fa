//! Reference implementations written as plain per-pixel, per-slot loops.
//!
//! They read parameters straight from an operator and share no code with the
//! tape ops, so agreement between the two is meaningful evidence.

use serde::Serialize;

use crate::attention::{
    normalized_coords, AttentionConfig, AttentionOp, Operator, PairwiseRelation, PatchRelation, PositionMode,
};
use crate::autograd::Tape;
use crate::error::{dim_err, Result};
use crate::nn::{seeded_rng, ForwardCtx, Linear};
use crate::tensor::Tensor;
use rand::Rng;

fn apply(layer: &Linear<f64>, v: &[f64]) -> Vec<f64> {
    let w = layer.weight.value();
    let (out, inp) = (w.dim(0), w.dim(1));
    assert_eq!(inp, v.len(), "linear width");
    (0..out)
        .map(|o| {
            let b = layer.bias.as_ref().map_or(0.0, |b| b.value().data()[o]);
            b + (0..inp).map(|i| w.data()[o * inp + i] * v[i]).sum::<f64>()
        })
        .collect()
}

fn mlp(layers: &[Linear<f64>], v: &[f64]) -> Vec<f64> {
    let mut h = v.to_vec();
    for (i, l) in layers.iter().enumerate() {
        if i > 0 {
            h.iter_mut().for_each(|x| *x = x.max(0.0));
        }
        h = apply(l, &h);
    }
    h
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn pixel(x: &Tensor<f64>, n: usize, y: usize, xx: usize) -> Vec<f64> {
    (0..x.dim(1)).map(|c| x.at(&[n, c, y, xx])).collect()
}

/// `out[n,o,..] = sum_i weight[o,i] * x[n,i,..] + bias[o]` by explicit loops.
pub fn linear_naive(x: &Tensor<f64>, weight: &Tensor<f64>, bias: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 2 || ws[1] != xs[1] {
        return Err(dim_err!("linear_naive: {xs:?} vs {ws:?}"));
    }
    let (n, cin, h, w, cout) = (xs[0], xs[1], xs[2], xs[3], ws[0]);
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    for b in 0..n {
        for o in 0..cout {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = bias.map_or(0.0, |bv| bv.data()[o]);
                    for i in 0..cin {
                        acc += weight.at(&[o, i]) * x.at(&[b, i, yy, xx]);
                    }
                    let off = out.offset(&[b, o, yy, xx]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Reference output of `op` on `x: [N, C, H, W]`.
pub fn attention_naive(op: &AttentionOp<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(dim_err!("attention_naive expects [N, C, H, W], got {xs:?}"));
    }
    let (n, h, w) = (xs[0], xs[2], xs[3]);
    let fp = op.footprint;
    let slots = fp.slots();
    let cm = op.out_channels();
    let share = op.config.share;
    let mut out = Tensor::zeros(&[n, cm, h, w]);

    if let Some(kernel) = &op.kernel {
        let kv = kernel.value();
        let cin = xs[1];
        for b in 0..n {
            for o in 0..cm {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for s in 0..slots {
                            let (dy, dx) = fp.slot_offset(s);
                            let (jy, jx) = (yy as isize + dy, xx as isize + dx);
                            if jy < 0 || jx < 0 || jy >= h as isize || jx >= w as isize {
                                continue;
                            }
                            for c in 0..cin {
                                acc += kv.at(&[o, c, s / fp.k, s % fp.k]) * x.at(&[b, c, jy as usize, jx as usize]);
                            }
                        }
                        let off = out.offset(&[b, o, yy, xx]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
        return Ok(out);
    }

    let phi_l = op.phi.as_ref().expect("phi");
    let psi_l = op.psi.as_ref().unwrap_or(phi_l);
    let beta_l = op.beta.as_ref().unwrap_or(phi_l);
    let d = op.widths.d;
    let coords = normalized_coords::<f64>(h, w);
    let pos_at = |yy: usize, xx: usize| -> Vec<f64> {
        let c = [coords.at(&[0, 0, yy, xx]), coords.at(&[0, 1, yy, xx])];
        apply(op.position.as_ref().expect("position layer"), &c)
    };

    for b in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let xi = pixel(x, b, yy, xx);
                let phi_i = apply(phi_l, &xi);
                // neighbors in slot order; `None` marks padding
                let nbrs: Vec<Option<(usize, usize, Vec<f64>)>> = (0..slots)
                    .map(|s| {
                        let (dy, dx) = fp.slot_offset(s);
                        let (jy, jx) = (yy as isize + dy, xx as isize + dx);
                        (jy >= 0 && jx >= 0 && jy < h as isize && jx < w as isize)
                            .then(|| (jy as usize, jx as usize, pixel(x, b, jy as usize, jx as usize)))
                    })
                    .collect();
                let zero_d = vec![0.0; d];
                let psi: Vec<Vec<f64>> =
                    nbrs.iter().map(|nb| nb.as_ref().map_or(zero_d.clone(), |(_, _, v)| apply(psi_l, v))).collect();
                let beta: Vec<Vec<f64>> =
                    nbrs.iter().map(|nb| nb.as_ref().map_or(vec![0.0; cm], |(_, _, v)| apply(beta_l, v))).collect();

                // weight[s][component]
                let weights: Vec<Vec<f64>> = match op.config.operator {
                    Operator::Pairwise { relation, position } => {
                        let layers = &op.gamma.as_ref().expect("gamma").layers;
                        (0..slots)
                            .map(|s| {
                                let psi_j = &psi[s];
                                let mut v: Vec<f64> = match relation {
                                    PairwiseRelation::Summation => phi_i.iter().zip(psi_j).map(|(a, b)| a + b).collect(),
                                    PairwiseRelation::Subtraction => {
                                        phi_i.iter().zip(psi_j).map(|(a, b)| a - b).collect()
                                    }
                                    PairwiseRelation::Hadamard => phi_i.iter().zip(psi_j).map(|(a, b)| a * b).collect(),
                                    PairwiseRelation::Concatenation => [phi_i.as_slice(), psi_j].concat(),
                                    PairwiseRelation::Dot => vec![dot(&phi_i, psi_j)],
                                };
                                let p_j = || nbrs[s].as_ref().map_or(vec![0.0, 0.0], |(jy, jx, _)| pos_at(*jy, *jx));
                                match position {
                                    PositionMode::None => {}
                                    PositionMode::Absolute => v.extend(p_j()),
                                    PositionMode::Relative => {
                                        let (p_i, p_j) = (pos_at(yy, xx), p_j());
                                        v.extend([p_i[0] - p_j[0], p_i[1] - p_j[1]]);
                                    }
                                }
                                mlp(layers, &v)
                            })
                            .collect()
                    }
                    Operator::Patchwise { relation } => {
                        let layers = &op.gamma.as_ref().expect("gamma").layers;
                        let v: Vec<f64> = match relation {
                            PatchRelation::StarProduct => psi.iter().map(|p| dot(&phi_i, p)).collect(),
                            PatchRelation::CliqueProduct => {
                                let phi_n: Vec<Vec<f64>> = nbrs
                                    .iter()
                                    .map(|nb| nb.as_ref().map_or(zero_d.clone(), |(_, _, v)| apply(phi_l, v)))
                                    .collect();
                                let mut v = Vec::with_capacity(slots * slots);
                                for pj in &phi_n {
                                    for pk in &psi {
                                        v.push(dot(pj, pk));
                                    }
                                }
                                v
                            }
                            PatchRelation::Concatenation => {
                                let mut v = phi_i.clone();
                                psi.iter().for_each(|p| v.extend_from_slice(p));
                                v
                            }
                        };
                        let all = mlp(layers, &v);
                        let g = cm / share;
                        all.chunks_exact(g).map(<[f64]>::to_vec).collect()
                    }
                    Operator::Scalar { normalize } => {
                        let logits: Vec<f64> = psi.iter().map(|p| dot(&phi_i, p)).collect();
                        let a = if normalize {
                            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                            let z: f64 = e.iter().sum();
                            e.into_iter().map(|v| v / z).collect()
                        } else {
                            logits
                        };
                        a.into_iter().map(|v| vec![v]).collect()
                    }
                    Operator::Conv => unreachable!(),
                };
                let scalar = matches!(op.config.operator, Operator::Scalar { .. });
                for c in 0..cm {
                    let comp = if scalar { 0 } else { c / share };
                    let acc: f64 = (0..slots).map(|s| weights[s][comp] * beta[s][c]).sum();
                    let off = out.offset(&[b, c, yy, xx]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of comparing one operator against its reference over several
/// random cases.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub operator: String,
    pub shape: Vec<usize>,
    pub cases: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Operators covered by the reference sweep: pairwise relations under every
/// position mode, the patchwise forms, scalar attention and convolution.
pub fn sweep_operators() -> Vec<Operator> {
    let mut v = Vec::new();
    for relation in PairwiseRelation::ALL {
        for position in PositionMode::ALL {
            v.push(Operator::Pairwise { relation, position });
        }
    }
    v.extend(PatchRelation::ALL.map(|relation| Operator::Patchwise { relation }));
    v.extend([Operator::Scalar { normalize: false }, Operator::Scalar { normalize: true }, Operator::Conv]);
    v
}

/// Small-channel config for verification at `C = 16`.
pub fn small_config(operator: Operator) -> AttentionConfig {
    let share = if matches!(operator, Operator::Scalar { .. }) { 8 } else { 2 };
    AttentionConfig { operator, gamma_depth: 2, r1: 4, r2: 2, share, sharing: Default::default() }
}

/// Runs `cases` random comparisons of `operator` at shape `1 x 16 x 5 x 5`.
pub fn check_operator(operator: Operator, cases: usize, k: usize, seed: u64) -> Result<OracleReport> {
    const TOL: f64 = 1e-10;
    let shape = [1, 16, 5, 5];
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = seeded_rng(seed, case as u64);
        let op = AttentionOp::<f64>::new("op", 16, k, small_config(operator), &mut rng)?;
        let x = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let ctx = ForwardCtx::eval(&tape);
        let fast = op.forward(&ctx, tape.constant(x.clone()))?.value();
        let slow = attention_naive(&op, &x)?;
        worst = worst.max(fast.max_abs_diff(&slow)?);
    }
    Ok(OracleReport {
        operator: operator.name(),
        shape: shape.to_vec(),
        cases,
        max_abs_diff: worst,
        tolerance: TOL,
        passed: worst <= TOL,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = seeded_rng(11, 0);
        let x = Tensor::from_fn(&[2, 4, 3, 3], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(&[5, 4], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[5], |_| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let fast = ops::linear(tape.constant(x.clone()), tape.constant(w.clone()), Some(tape.constant(b.clone())))
            .unwrap()
            .value();
        let slow = linear_naive(&x, &w, Some(&b)).unwrap();
        assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12);
    }

    #[test]
    fn every_operator_agrees_on_a_case() {
        for op in sweep_operators() {
            let r = check_operator(op, 1, 3, 7).unwrap();
            assert!(r.passed, "{} differs by {}", r.operator, r.max_abs_diff);
        }
    }
}
