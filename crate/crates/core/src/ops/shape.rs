use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{split_shape, Real, Tensor};

pub fn reshape<'t, T: Real>(a: Var<'t, T>, shape: &[usize]) -> Result<Var<'t, T>> {
    let old = a.shape();
    let out = (*a.value()).clone().reshape(shape)?;
    Ok(a.tape().record(out, &[a], move |g, _| vec![Some(g.clone().reshape(&old).expect("same numel"))]))
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, T: Real>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(dim_err!("concat axis {axis} out of range for {base:?}"));
    }
    let mut lens = Vec::with_capacity(parts.len());
    for p in parts {
        let s = p.shape();
        let compatible =
            s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(dim_err!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
        }
        lens.push(s[axis]);
    }
    let (outer, _, inner) = split_shape(&base, axis);
    let total: usize = lens.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut out = vec![T::zero(); outer * total * inner];
    let mut offset = 0;
    for (p, &len) in parts.iter().zip(&lens) {
        let v = p.value();
        let src = v.data();
        for o in 0..outer {
            let dst = (o * total + offset) * inner;
            out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        offset += len;
    }
    let out = Tensor::new(&out_shape, out)?;
    let tape = first.tape();
    Ok(tape.record(out, parts, move |g, needs| {
        let mut grads = Vec::with_capacity(lens.len());
        let mut offset = 0;
        for (k, &len) in lens.iter().enumerate() {
            if needs[k] {
                let mut shape = out_shape.clone();
                shape[axis] = len;
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    let src = (o * total + offset) * inner;
                    d[o * len * inner..(o + 1) * len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                grads.push(Some(Tensor::new(&shape, d).expect("slice shape")));
            } else {
                grads.push(None);
            }
            offset += len;
        }
        grads
    }))
}

fn swap_raw<T: Real>(src: &[T], outer: usize, a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..a {
            for j in 0..b {
                let s = ((o * a + i) * b + j) * inner;
                let d = ((o * b + j) * a + i) * inner;
                out[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
    }
    out
}

/// Swaps `axis` with `axis + 1`.
pub fn swap_adjacent<'t, T: Real>(x: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if axis + 1 >= shape.len() {
        return Err(dim_err!("swap_adjacent: axis {axis} invalid for {shape:?}"));
    }
    let outer: usize = shape[..axis].iter().product();
    let (a, b) = (shape[axis], shape[axis + 1]);
    let inner: usize = shape[axis + 2..].iter().product();
    let mut out_shape = shape.clone();
    out_shape.swap(axis, axis + 1);
    let out = Tensor::new(&out_shape, swap_raw(x.value().data(), outer, a, b, inner))?;
    Ok(x.tape().record(out, &[x], move |g, _| {
        vec![Some(Tensor::new(&shape, swap_raw(g.data(), outer, b, a, inner)).expect("swap shape"))]
    }))
}

/// `[N, C, rest..] -> [N, C, K, rest..]`, repeating each value over a new
/// footprint-slot axis.
pub fn broadcast_slots<'t, T: Real>(x: Var<'t, T>, slots: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(dim_err!("broadcast_slots needs rank >= 2, got {shape:?}"));
    }
    let outer = shape[0] * shape[1];
    let inner: usize = shape[2..].iter().product();
    let mut out_shape = shape[..2].to_vec();
    out_shape.push(slots);
    out_shape.extend_from_slice(&shape[2..]);
    let xv = x.value();
    let mut out = vec![T::zero(); outer * slots * inner];
    for o in 0..outer {
        let src = &xv.data()[o * inner..(o + 1) * inner];
        for k in 0..slots {
            let d = (o * slots + k) * inner;
            out[d..d + inner].copy_from_slice(src);
        }
    }
    let out = Tensor::new(&out_shape, out)?;
    Ok(x.tape().record(out, &[x], move |g, _| {
        let mut d = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut d[o * inner..(o + 1) * inner];
            for k in 0..slots {
                let s = (o * slots + k) * inner;
                for (a, &b) in dst.iter_mut().zip(&g.data()[s..s + inner]) {
                    *a += b;
                }
            }
        }
        vec![Some(Tensor::new(&shape, d).expect("shape"))]
    }))
}

/// `[1, rest..] -> [n, rest..]`.
pub fn expand_batch<'t, T: Real>(x: Var<'t, T>, n: usize) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.first() != Some(&1) {
        return Err(dim_err!("expand_batch needs a leading extent of 1, got {shape:?}"));
    }
    let xv = x.value();
    let inner = xv.numel();
    let mut out_shape = shape.clone();
    out_shape[0] = n;
    let mut out = Vec::with_capacity(n * inner);
    for _ in 0..n {
        out.extend_from_slice(xv.data());
    }
    let out = Tensor::new(&out_shape, out)?;
    Ok(x.tape().record(out, &[x], move |g, _| {
        let mut d = vec![T::zero(); inner];
        for chunk in g.data().chunks_exact(inner) {
            for (a, &b) in d.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        vec![Some(Tensor::new(&shape, d).expect("shape"))]
    }))
}

/// Sums over `axis`, optionally keeping it with extent 1.
pub fn sum_axis<'t, T: Real>(x: Var<'t, T>, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(dim_err!("sum_axis: axis {axis} out of range for {shape:?}"));
    }
    let (outer, len, inner) = split_shape(&shape, axis);
    let xv = x.value();
    let src = xv.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let s = (o * len + l) * inner;
            for (a, &b) in dst.iter_mut().zip(&src[s..s + inner]) {
                *a += b;
            }
        }
    }
    let mut out_shape = shape.clone();
    if keepdim {
        out_shape[axis] = 1;
    } else {
        out_shape.remove(axis);
    }
    let out = Tensor::new(&out_shape, out)?;
    Ok(x.tape().record(out, &[x], move |g, _| {
        let mut d = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let gs = &g.data()[o * inner..(o + 1) * inner];
            for l in 0..len {
                let s = (o * len + l) * inner;
                d[s..s + inner].copy_from_slice(gs);
            }
        }
        vec![Some(Tensor::new(&shape, d).expect("shape"))]
    }))
}

/// Reorders `axis` so that output index `i` takes input index `order[i]`.
pub fn permute_axis<'t, T: Real>(x: Var<'t, T>, axis: usize, order: &[usize]) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if axis >= shape.len() || order.len() != shape[axis] {
        return Err(dim_err!("permute_axis: order of {} for axis {axis} of {shape:?}", order.len()));
    }
    let mut seen = vec![false; order.len()];
    for &o in order {
        if o >= order.len() || std::mem::replace(&mut seen[o], true) {
            return Err(dim_err!("permute_axis: {order:?} is not a permutation"));
        }
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = order.len();
    let order = order.to_vec();
    let xv = x.value();
    let mut out = vec![T::zero(); xv.numel()];
    for o in 0..outer {
        for (i, &src) in order.iter().enumerate() {
            let (d, s) = ((o * len + i) * inner, (o * len + src) * inner);
            out[d..d + inner].copy_from_slice(&xv.data()[s..s + inner]);
        }
    }
    let out = Tensor::new(&shape, out)?;
    Ok(x.tape().record(out, &[x], move |g, _| {
        let mut d = vec![T::zero(); g.numel()];
        for o in 0..outer {
            for (i, &src) in order.iter().enumerate() {
                let (dst, s) = ((o * len + src) * inner, (o * len + i) * inner);
                d[dst..dst + inner].copy_from_slice(&g.data()[s..s + inner]);
            }
        }
        vec![Some(Tensor::new(&shape, d).expect("shape"))]
    }))
}
