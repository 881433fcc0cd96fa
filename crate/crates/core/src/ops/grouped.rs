//! Channel-group primitives used by vector attention.

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

/// Hadamard product with a weight shared across channel groups:
/// `out[n, c, ..] = weight[n, c / share, ..] * values[n, c, ..]` for
/// `weight: [N, G, ..]`, `values: [N, G * share, ..]`.
pub fn hadamard_grouped<'t, T: Real>(weight: Var<'t, T>, values: Var<'t, T>) -> Result<Var<'t, T>> {
    let (ws, vs) = (weight.shape(), values.shape());
    if ws.len() < 2 || ws.len() != vs.len() || ws[0] != vs[0] || ws[2..] != vs[2..] || ws[1] == 0 || vs[1] % ws[1] != 0
    {
        return Err(dim_err!("hadamard_grouped: weight {ws:?} cannot scale values {vs:?}"));
    }
    let (n, g, c) = (ws[0], ws[1], vs[1]);
    let share = c / g;
    let s: usize = vs[2..].iter().product();
    let (wv, vv) = (weight.value(), values.value());
    let mut out = vec![T::zero(); n * c * s];
    for b in 0..n {
        for ch in 0..c {
            let wrow = &wv.data()[(b * g + ch / share) * s..(b * g + ch / share + 1) * s];
            let off = (b * c + ch) * s;
            for ((o, &a), &x) in out[off..off + s].iter_mut().zip(wrow).zip(&vv.data()[off..off + s]) {
                *o = a * x;
            }
        }
    }
    let out = Tensor::new(&vs, out)?;
    Ok(weight.tape().record(out, &[weight, values], move |grad, needs| {
        let gd = grad.data();
        let dw = needs[0].then(|| {
            let mut dw = vec![T::zero(); n * g * s];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * s;
                    let drow = &mut dw[(b * g + ch / share) * s..(b * g + ch / share + 1) * s];
                    for ((d, &gv), &x) in drow.iter_mut().zip(&gd[off..off + s]).zip(&vv.data()[off..off + s]) {
                        *d += gv * x;
                    }
                }
            }
            Tensor::new(&ws, dw).expect("shape")
        });
        let dv = needs[1].then(|| {
            let mut dv = vec![T::zero(); n * c * s];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * s;
                    let wrow = &wv.data()[(b * g + ch / share) * s..(b * g + ch / share + 1) * s];
                    for ((d, &gv), &a) in dv[off..off + s].iter_mut().zip(&gd[off..off + s]).zip(wrow) {
                        *d = gv * a;
                    }
                }
            }
            Tensor::new(&vs, dv).expect("shape")
        });
        vec![dw, dv]
    }))
}

/// All slot-pair inner products of two unfolded maps:
/// `a, b: [N, d, K, S..] -> [N, K * K, S..]` with
/// `out[n, j * K + k, ..] = sum_c a[n, c, j, ..] * b[n, c, k, ..]`.
pub fn slot_gram<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (as_, bs) = (a.shape(), b.shape());
    if as_ != bs || as_.len() < 3 {
        return Err(dim_err!("slot_gram: {as_:?} vs {bs:?}"));
    }
    let (n, d, kk) = (as_[0], as_[1], as_[2]);
    let s: usize = as_[3..].iter().product();
    let (av, bv) = (a.value(), b.value());
    let idx = move |bi: usize, c: usize, k: usize| ((bi * d + c) * kk + k) * s;
    let mut out = vec![T::zero(); n * kk * kk * s];
    for bi in 0..n {
        for j in 0..kk {
            for k in 0..kk {
                let o = (bi * kk * kk + j * kk + k) * s;
                for c in 0..d {
                    let (ja, kb) = (idx(bi, c, j), idx(bi, c, k));
                    for t in 0..s {
                        out[o + t] += av.data()[ja + t] * bv.data()[kb + t];
                    }
                }
            }
        }
    }
    let mut out_shape = vec![n, kk * kk];
    out_shape.extend_from_slice(&as_[3..]);
    let out = Tensor::new(&out_shape, out)?;
    Ok(a.tape().record(out, &[a, b], move |grad, needs| {
        let gd = grad.data();
        let mut da = needs[0].then(|| vec![T::zero(); n * d * kk * s]);
        let mut db = needs[1].then(|| vec![T::zero(); n * d * kk * s]);
        for bi in 0..n {
            for j in 0..kk {
                for k in 0..kk {
                    let o = (bi * kk * kk + j * kk + k) * s;
                    for c in 0..d {
                        let (ja, kb) = (idx(bi, c, j), idx(bi, c, k));
                        for t in 0..s {
                            let gv = gd[o + t];
                            if let Some(da) = da.as_mut() {
                                da[ja + t] += gv * bv.data()[kb + t];
                            }
                            if let Some(db) = db.as_mut() {
                                db[kb + t] += gv * av.data()[ja + t];
                            }
                        }
                    }
                }
            }
        }
        vec![
            da.map(|v| Tensor::new(&as_, v).expect("shape")),
            db.map(|v| Tensor::new(&as_, v).expect("shape")),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn grouped_weight_broadcasts_over_share() {
        let tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::from_f64(&[1, 2, 1], &[2.0, -1.0]).unwrap());
        let v = tape.constant(Tensor::from_f64(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = hadamard_grouped(w, v).unwrap();
        assert_eq!(y.value().data(), &[2.0, 4.0, -3.0, -4.0]);
    }

    #[test]
    fn gram_enumerates_pairs_row_major() {
        // K = 2, d = 1: a slots (c, d) = (5, 7), b slots (a, b) = (2, 3)
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64(&[1, 1, 2, 1], &[5.0, 7.0]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[1, 1, 2, 1], &[2.0, 3.0]).unwrap());
        let g = slot_gram(a, b).unwrap();
        assert_eq!(g.value().data(), &[10.0, 15.0, 14.0, 21.0]);
    }
}
