use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{gemm, Real, Tensor};

// Below this many weights the row-axpy loops beat GEMM packing overhead.
const SMALL_WEIGHT: usize = 256;

fn forward_rows<T: Real>(w: &[T], x: &[T], out: &mut [T], cout: usize, cin: usize, s: usize) {
    if cout * cin <= SMALL_WEIGHT {
        for o in 0..cout {
            let row = &mut out[o * s..(o + 1) * s];
            for i in 0..cin {
                let wv = w[o * cin + i];
                for (r, &xv) in row.iter_mut().zip(&x[i * s..(i + 1) * s]) {
                    *r += wv * xv;
                }
            }
        }
    } else {
        gemm(false, false, cout, s, cin, T::one(), w, x, T::one(), out);
    }
}

/// Pointwise linear map over axis 1: `[N, Cin, rest..] -> [N, Cout, rest..]`
/// with `out[n,o,..] = sum_i weight[o,i] * x[n,i,..] + bias[o]`.
pub fn linear<'t, T: Real>(x: Var<'t, T>, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() < 2 || ws.len() != 2 || ws[1] != xs[1] {
        return Err(dim_err!("linear: input {xs:?} incompatible with weight {ws:?}"));
    }
    let (n, cin, cout) = (xs[0], xs[1], ws[0]);
    let s: usize = xs[2..].iter().product();
    if let Some(b) = &bias {
        if b.shape() != [cout] {
            return Err(dim_err!("linear: bias {:?} for {cout} outputs", b.shape()));
        }
    }
    let (xv, wv) = (x.value(), weight.value());
    let mut out = vec![T::zero(); n * cout * s];
    if let Some(b) = &bias {
        let bv = b.value();
        for (chunk, &bo) in out.chunks_exact_mut(s).zip(bv.data().iter().cycle()) {
            chunk.fill(bo);
        }
    }
    for b in 0..n {
        forward_rows(
            wv.data(),
            &xv.data()[b * cin * s..(b + 1) * cin * s],
            &mut out[b * cout * s..(b + 1) * cout * s],
            cout,
            cin,
            s,
        );
    }
    let mut out_shape = xs.clone();
    out_shape[1] = cout;
    let out = Tensor::new(&out_shape, out)?;

    let mut parents = vec![x, weight];
    parents.extend(bias);
    let tape = x.tape();
    Ok(tape.record(out, &parents, move |g, needs| {
        let gd = g.data();
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); n * cin * s];
            for b in 0..n {
                let gb = &gd[b * cout * s..(b + 1) * cout * s];
                let db = &mut dx[b * cin * s..(b + 1) * cin * s];
                if cout * cin <= SMALL_WEIGHT {
                    for o in 0..cout {
                        let grow = &gb[o * s..(o + 1) * s];
                        for i in 0..cin {
                            let w = wv.data()[o * cin + i];
                            for (d, &gv) in db[i * s..(i + 1) * s].iter_mut().zip(grow) {
                                *d += w * gv;
                            }
                        }
                    }
                } else {
                    gemm(true, false, cin, s, cout, T::one(), wv.data(), gb, T::zero(), db);
                }
            }
            Tensor::new(&xs, dx).expect("shape")
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); cout * cin];
            for b in 0..n {
                let gb = &gd[b * cout * s..(b + 1) * cout * s];
                let xb = &xv.data()[b * cin * s..(b + 1) * cin * s];
                if cout * cin <= SMALL_WEIGHT {
                    for o in 0..cout {
                        let grow = &gb[o * s..(o + 1) * s];
                        for i in 0..cin {
                            let acc: T = grow.iter().zip(&xb[i * s..(i + 1) * s]).map(|(&a, &c)| a * c).sum();
                            dw[o * cin + i] += acc;
                        }
                    }
                } else {
                    gemm(false, true, cout, cin, s, T::one(), gb, xb, T::one(), &mut dw);
                }
            }
            Tensor::new(&[cout, cin], dw).expect("shape")
        });
        let mut grads = vec![dx, dw];
        if needs.len() == 3 {
            grads.push(needs[2].then(|| {
                let mut db = vec![T::zero(); cout];
                for (k, chunk) in gd.chunks_exact(s).enumerate() {
                    db[k % cout] += chunk.iter().copied().sum();
                }
                Tensor::new(&[cout], db).expect("shape")
            }));
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn hand_sum_example() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        let w = tape.constant(Tensor::from_f64(&[2, 2], &[1.0, 1.0, 2.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = linear(x, w, Some(b)).unwrap();
        assert_eq!(y.value().data(), &[2.0, 4.0]);
    }

    #[test]
    fn identity_weight_is_identity() {
        let tape = Tape::<f64>::new();
        let xt = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64).sin());
        let x = tape.constant(xt.clone());
        let w = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let y = linear(x, w, None).unwrap();
        assert_eq!(*y.value(), xt);
    }

    #[test]
    fn weight_width_must_match_channels() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(linear(x, w, None).is_err());
    }
}
