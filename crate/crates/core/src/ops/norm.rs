use std::sync::Arc;

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

/// Batch statistics from a training-mode pass, per channel.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    pub unbiased_var: Tensor<T>,
}

fn check<T: Real>(x: &Var<'_, T>, gamma: &Var<'_, T>, beta: &Var<'_, T>) -> Result<(usize, usize, usize)> {
    let xs = x.shape();
    if xs.len() < 2 {
        return Err(dim_err!("batch_norm needs [N, C, ..], got {xs:?}"));
    }
    let c = xs[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err!(
            "batch_norm: affine params {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok((xs[0], c, xs[2..].iter().product()))
}

/// Affine normalization `y = gamma * xhat + beta` given per-channel
/// `xhat = (x - mean) * inv_std`; returns the output and the `xhat` buffer.
fn normalize<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
    n: usize,
    c: usize,
    s: usize,
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for k in off..off + s {
                let h = (x[k] - mean[ch]) * inv_std[ch];
                xhat[k] = h;
                y[k] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

fn affine_grads<T: Real>(g: &[T], xhat: &[T], n: usize, c: usize, s: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for k in off..off + s {
                dgamma[ch] += g[k] * xhat[k];
                dbeta[ch] += g[k];
            }
        }
    }
    (dgamma, dbeta)
}

/// Training-mode batch normalization over every axis except the channel axis.
pub fn batch_norm_train<'t, T: Real>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<(Var<'t, T>, BatchStats<T>)> {
    let (n, c, s) = check(&x, &gamma, &beta)?;
    let m = n * s;
    if m == 0 {
        return Err(dim_err!("batch_norm over an empty batch"));
    }
    let xv = x.value();
    let xd = xv.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            mean[ch] += xd[off..off + s].iter().copied().sum();
        }
    }
    let mt = T::of(m as f64);
    for v in &mut mean {
        *v /= mt;
    }
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            var[ch] += xd[off..off + s].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum();
        }
    }
    for v in &mut var {
        *v /= mt;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
    let (gv, bv) = (gamma.value(), beta.value());
    let (y, xhat) = normalize(xd, gv.data(), bv.data(), &mean, &inv_std, n, c, s);
    let unbiased = if m > 1 { T::of(m as f64 / (m as f64 - 1.0)) } else { T::one() };
    let stats = BatchStats {
        mean: Tensor::new(&[c], mean)?,
        unbiased_var: Tensor::new(&[c], var.iter().map(|&v| v * unbiased).collect())?,
    };
    let shape = x.shape();
    let out = Tensor::new(&shape, y)?;
    let xhat = Arc::new(xhat);
    let y = x.tape().record(out, &[x, gamma, beta], move |g, needs| {
        let gd = g.data();
        let (dgamma, dbeta) = affine_grads(gd, &xhat, n, c, s);
        let dx = needs[0].then(|| {
            // dx = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat))
            let mut dx = vec![T::zero(); gd.len()];
            for b in 0..n {
                for ch in 0..c {
                    let k_scale = gv.data()[ch] * inv_std[ch];
                    let mg = dbeta[ch] / mt;
                    let mgx = dgamma[ch] / mt;
                    let off = (b * c + ch) * s;
                    for k in off..off + s {
                        dx[k] = k_scale * (gd[k] - mg - xhat[k] * mgx);
                    }
                }
            }
            Tensor::new(&shape, dx).expect("shape")
        });
        vec![
            dx,
            needs[1].then(|| Tensor::new(&[c], dgamma).expect("shape")),
            needs[2].then(|| Tensor::new(&[c], dbeta).expect("shape")),
        ]
    });
    Ok((y, stats))
}

/// Inference-mode batch normalization with fixed running statistics.
pub fn batch_norm_eval<'t, T: Real>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let (n, c, s) = check(&x, &gamma, &beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(dim_err!("batch_norm: running stats do not match {c} channels"));
    }
    let inv_std: Vec<T> = running_var.data().iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
    let (gv, bv) = (gamma.value(), beta.value());
    let (y, xhat) = normalize(x.value().data(), gv.data(), bv.data(), running_mean.data(), &inv_std, n, c, s);
    let shape = x.shape();
    let out = Tensor::new(&shape, y)?;
    Ok(x.tape().record(out, &[x, gamma, beta], move |g, needs| {
        let gd = g.data();
        let (dgamma, dbeta) = affine_grads(gd, &xhat, n, c, s);
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); gd.len()];
            for b in 0..n {
                for ch in 0..c {
                    let k_scale = gv.data()[ch] * inv_std[ch];
                    let off = (b * c + ch) * s;
                    for k in off..off + s {
                        dx[k] = k_scale * gd[k];
                    }
                }
            }
            Tensor::new(&shape, dx).expect("shape")
        });
        vec![
            dx,
            needs[1].then(|| Tensor::new(&[c], dgamma).expect("shape")),
            needs[2].then(|| Tensor::new(&[c], dbeta).expect("shape")),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::Rng;

    #[test]
    fn constant_input_gives_beta() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 2, 2], 4.2));
        let g = tape.constant(Tensor::from_f64(&[3], &[1.5, 2.0, 0.5]).unwrap());
        let b = tape.constant(Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap());
        let (y, _) = batch_norm_train(x, g, b, 1e-5).unwrap();
        let y = y.value();
        for n in 0..2 {
            for (ch, want) in [0.1, -0.2, 0.3].iter().enumerate() {
                for k in 0..4 {
                    assert!((y.data()[(n * 3 + ch) * 4 + k] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn standardized_input_passes_through() {
        // two values per channel at +-1: mean 0, biased var 1
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[2, 1], &[1.0, -1.0]).unwrap());
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let (y, _) = batch_norm_train(x, g, b, 1e-5).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-5);
        assert!((y.value().data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn random_input_output_statistics_match_affine() {
        let mut rng = crate::nn::seeded_rng(3, 0);
        let (n, c, s) = (4, 3, 9);
        let x = Tensor::from_fn(&[n, c, 3, 3], |_| rng.random_range(-3.0..5.0));
        let gamma = [0.7, 1.3, 2.0];
        let beta = [-0.4, 0.0, 1.1];
        let tape = Tape::<f64>::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::from_f64(&[c], &gamma).unwrap());
        let b = tape.constant(Tensor::from_f64(&[c], &beta).unwrap());
        let (y, _) = batch_norm_train(xv, g, b, 1e-5).unwrap();
        let y = y.value();
        for ch in 0..c {
            let vals: Vec<f64> =
                (0..n).flat_map(|bi| y.data()[(bi * c + ch) * s..(bi * c + ch + 1) * s].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!((mean - beta[ch]).abs() < 1e-5);
            assert!((std - gamma[ch]).abs() < 1e-5, "std {std} vs {}", gamma[ch]);
        }
    }
}
