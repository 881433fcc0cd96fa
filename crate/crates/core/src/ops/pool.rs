use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 || len + 2 * pad < k {
        return Err(dim_err!("pooling window k={k} stride={stride} pad={pad} does not fit extent {len}"));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

/// Max pooling over `k x k` windows of `[N, C, H, W]`. Padded positions never
/// win; a window made only of padding is an error.
pub fn max_pool2d<'t, T: Real>(x: Var<'t, T>, k: usize, stride: usize, pad: usize) -> Result<Var<'t, T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(dim_err!("max_pool2d expects [N, C, H, W], got {xs:?}"));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (ho, wo) = (out_extent(h, k, stride, pad)?, out_extent(w, k, stride, pad)?);
    let xv = x.value();
    let xd = xv.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best: Option<(T, usize)> = None;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best.is_none_or(|(b, _)| xd[idx] > b) {
                            best = Some((xd[idx], idx));
                        }
                    }
                }
                let (v, idx) = best.ok_or_else(|| dim_err!("max_pool2d: empty pooling window"))?;
                out.push(v);
                argmax.push(idx);
            }
        }
    }
    let out = Tensor::new(&[n, c, ho, wo], out)?;
    Ok(x.tape().record(out, &[x], move |g, _| {
        let mut dx = vec![T::zero(); n * c * h * w];
        for (&idx, &gv) in argmax.iter().zip(g.data()) {
            dx[idx] += gv;
        }
        vec![Some(Tensor::new(&xs, dx).expect("shape"))]
    }))
}

/// Mean over spatial axes: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xs = x.shape();
    if xs.len() < 3 {
        return Err(dim_err!("global_avg_pool expects [N, C, spatial..], got {xs:?}"));
    }
    let (n, c) = (xs[0], xs[1]);
    let s: usize = xs[2..].iter().product();
    if s == 0 {
        return Err(dim_err!("global_avg_pool over an empty window"));
    }
    let inv = T::of(1.0 / s as f64);
    let out: Vec<T> = x.value().data().chunks_exact(s).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    let out = Tensor::new(&[n, c], out)?;
    Ok(x.tape().record(out, &[x], move |g, _| {
        let mut dx = Vec::with_capacity(n * c * s);
        for &gv in g.data() {
            dx.extend(std::iter::repeat_n(gv * inv, s));
        }
        vec![Some(Tensor::new(&xs, dx).expect("shape"))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn max_of_block() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(max_pool2d(x, 2, 2, 0).unwrap().value().data(), &[4.0]);
    }

    #[test]
    fn halves_extents() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 8, 6]));
        assert_eq!(max_pool2d(x, 2, 2, 0).unwrap().shape(), vec![2, 3, 4, 3]);
    }

    #[test]
    fn empty_window_is_error() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(max_pool2d(x, 2, 2, 0).is_err());
        assert!(max_pool2d(x, 0, 1, 0).is_err());
    }

    #[test]
    fn gap_means() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        assert_eq!(global_avg_pool(x).unwrap().value().data(), &[1.5, 5.5]);
    }
}
