//! Differentiable primitives. Each records its forward value and a backward
//! rule on the tape of its operands.

mod elementwise;
mod grouped;
mod linear;
mod norm;
mod pool;
mod shape;
mod softmax;
mod unfold;

pub use elementwise::{add, mean_all, mul, relu, scale, sub, sum_all};
pub use grouped::{hadamard_grouped, slot_gram};
pub use linear::linear;
pub use norm::{batch_norm_eval, batch_norm_train, BatchStats};
pub use pool::{global_avg_pool, max_pool2d};
pub use shape::{broadcast_slots, concat, expand_batch, permute_axis, reshape, sum_axis, swap_adjacent};
pub use softmax::{log_softmax, softmax};
pub use unfold::{unfold, FootprintSpec};

use crate::autograd::Var;
use crate::error::{dim_err, Result};
use crate::tensor::Real;

/// Cross-correlation with zero padding:
/// `x: [N, Cin, H, W]`, `kernel: [Cout, Cin, k, k]` -> `[N, Cout, H', W']`.
/// Built as unfold followed by a pointwise linear over `Cin * K` features.
pub fn conv2d<'t, T: Real>(x: Var<'t, T>, kernel: Var<'t, T>, fp: &FootprintSpec) -> Result<Var<'t, T>> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != fp.k || ks[3] != fp.k {
        return Err(dim_err!("conv2d: input {xs:?} incompatible with kernel {ks:?} (k={})", fp.k));
    }
    let cols = unfold(x, fp)?;
    let cs = cols.shape();
    let cols = reshape(cols, &[cs[0], cs[1] * cs[2], cs[3], cs[4]])?;
    let w = reshape(kernel, &[ks[0], ks[1] * ks[2] * ks[3]])?;
    linear(cols, w, None)
}
