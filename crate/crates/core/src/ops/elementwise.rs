use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

fn same_shape<T: Real>(op: &str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(dim_err!("{op}: shape {sa:?} vs {sb:?}"));
    }
    Ok(sa)
}

fn zip_with<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked")
}

pub fn add<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("add", &a, &b)?;
    let out = zip_with(&a.value(), &b.value(), |x, y| x + y);
    Ok(a.tape().record(out, &[a, b], |g, needs| {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
    }))
}

pub fn sub<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("sub", &a, &b)?;
    let out = zip_with(&a.value(), &b.value(), |x, y| x - y);
    Ok(a.tape().record(out, &[a, b], |g, needs| {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
    }))
}

/// Elementwise (Hadamard) product of equal shapes.
pub fn mul<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    same_shape("mul", &a, &b)?;
    let (av, bv) = (a.value(), b.value());
    let out = zip_with(&av, &bv, |x, y| x * y);
    Ok(a.tape().record(out, &[a, b], move |g, needs| {
        vec![
            needs[0].then(|| zip_with(g, &bv, |x, y| x * y)),
            needs[1].then(|| zip_with(g, &av, |x, y| x * y)),
        ]
    }))
}

pub fn scale<'t, T: Real>(a: Var<'t, T>, alpha: f64) -> Var<'t, T> {
    let alpha = T::of(alpha);
    let out = a.value().map(|v| v * alpha);
    a.tape().record(out, &[a], move |g, _| vec![Some(g.map(|v| v * alpha))])
}

pub fn relu<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let av = a.value();
    let out = av.map(|v| if v > T::zero() { v } else { T::zero() });
    a.tape().record(out, &[a], move |g, _| {
        vec![Some(zip_with(g, &av, |gv, x| if x > T::zero() { gv } else { T::zero() }))]
    })
}

/// Sum of all elements, as a one-element tensor.
pub fn sum_all<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let shape = a.shape();
    let out = Tensor::scalar(a.value().sum());
    a.tape().record(out, &[a], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
}

pub fn mean_all<'t, T: Real>(a: Var<'t, T>) -> Var<'t, T> {
    let n = a.value().numel().max(1);
    scale(sum_all(a), 1.0 / n as f64)
}
