use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{split_shape, Real, Tensor};

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(dim_err!("softmax axis {axis} invalid for {shape:?}"));
    }
    Ok(())
}

/// Numerically stable softmax along `axis`.
pub fn softmax<'t, T: Real>(x: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    check_axis(&shape, axis)?;
    let (outer, len, inner) = split_shape(&shape, axis);
    let xv = x.value();
    let xd = xv.data();
    let mut y = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mx = (0..len).map(|l| xd[at(l)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for l in 0..len {
                let e = (xd[at(l)] - mx).exp();
                y[at(l)] = e;
                z += e;
            }
            for l in 0..len {
                y[at(l)] /= z;
            }
        }
    }
    let out = Tensor::new(&shape, y)?;
    let yv = out.clone();
    Ok(x.tape().record(out, &[x], move |g, _| {
        let (gd, yd) = (g.data(), yv.data());
        let mut dx = vec![T::zero(); gd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let dot: T = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                for l in 0..len {
                    dx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                }
            }
        }
        vec![Some(Tensor::new(&shape, dx).expect("shape"))]
    }))
}

/// `log(softmax(x))` along `axis`.
pub fn log_softmax<'t, T: Real>(x: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    check_axis(&shape, axis)?;
    let (outer, len, inner) = split_shape(&shape, axis);
    let xv = x.value();
    let xd = xv.data();
    let mut y = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mx = (0..len).map(|l| xd[at(l)]).fold(T::neg_infinity(), T::max);
            let lse = mx + (0..len).map(|l| (xd[at(l)] - mx).exp()).sum::<T>().ln();
            for l in 0..len {
                y[at(l)] = xd[at(l)] - lse;
            }
        }
    }
    let out = Tensor::new(&shape, y)?;
    let yv = out.clone();
    Ok(x.tape().record(out, &[x], move |g, _| {
        let (gd, yd) = (g.data(), yv.data());
        let mut dx = vec![T::zero(); gd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let gsum: T = (0..len).map(|l| gd[at(l)]).sum();
                for l in 0..len {
                    dx[at(l)] = gd[at(l)] - yd[at(l)].exp() * gsum;
                }
            }
        }
        vec![Some(Tensor::new(&shape, dx).expect("shape"))]
    }))
}
