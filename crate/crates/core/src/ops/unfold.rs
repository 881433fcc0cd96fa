use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{config_err, dim_err, Result};
use crate::tensor::{Real, Tensor};

/// Geometry of a local neighborhood: a `k x k` window, its stride and the
/// zero padding on each border.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintSpec {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl FootprintSpec {
    /// Stride-1 footprint padded to keep the spatial extent.
    pub fn same(k: usize) -> Result<Self> {
        Self::strided(k, 1)
    }

    pub fn strided(k: usize, stride: usize) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(config_err!("footprint side must be odd, got {k}"));
        }
        if stride == 0 {
            return Err(config_err!("footprint stride must be positive"));
        }
        Ok(Self { k, stride, pad: (k - 1) / 2 })
    }

    /// Number of slots `K = k * k`.
    pub fn slots(&self) -> usize {
        self.k * self.k
    }

    pub fn output_extent(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Offset `(dy, dx)` of slot `s` relative to the window center;
    /// slots run row-major over the window.
    pub fn slot_offset(&self, s: usize) -> (isize, isize) {
        let (ky, kx) = (s / self.k, s % self.k);
        (ky as isize - self.pad as isize, kx as isize - self.pad as isize)
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    fp: FootprintSpec,
}

impl Geometry {
    /// Visits `(dst, src)` index pairs for every in-bounds slot entry.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let Geometry { n, c, h, w, ho, wo, fp } = *self;
        let kk = fp.slots();
        for plane in 0..n * c {
            let src_base = plane * h * w;
            for s in 0..kk {
                let (ky, kx) = (s / fp.k, s % fp.k);
                let dst_base = (plane * kk + s) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * fp.stride + ky) as isize - fp.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = src_base + iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * fp.stride + kx) as isize - fp.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        f(dst_base + oy * wo + ox, row + ix as usize);
                    }
                }
            }
        }
    }
}

/// Gathers every footprint neighborhood: `[N, C, H, W] -> [N, C, K, H', W']`.
/// Slot `s` holds the neighbor at window position `(s / k, s % k)`;
/// out-of-bounds neighbors are zero.
pub fn unfold<'t, T: Real>(x: Var<'t, T>, fp: &FootprintSpec) -> Result<Var<'t, T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(dim_err!("unfold expects [N, C, H, W], got {xs:?}"));
    }
    if fp.k.is_multiple_of(2) {
        return Err(config_err!("footprint side must be odd, got {}", fp.k));
    }
    let (h, w) = (xs[2], xs[3]);
    if h + 2 * fp.pad < fp.k || w + 2 * fp.pad < fp.k {
        return Err(dim_err!("footprint {} does not fit {h}x{w}", fp.k));
    }
    let geo = Geometry { n: xs[0], c: xs[1], h, w, ho: fp.output_extent(h), wo: fp.output_extent(w), fp: *fp };
    let kk = fp.slots();
    let xv = x.value();
    let xd = xv.data();
    let mut out = vec![T::zero(); geo.n * geo.c * kk * geo.ho * geo.wo];
    geo.for_each(|d, s| out[d] = xd[s]);
    let out = Tensor::new(&[geo.n, geo.c, kk, geo.ho, geo.wo], out)?;
    Ok(x.tape().record(out, &[x], move |g, _| {
        let gd = g.data();
        let mut dx = vec![T::zero(); geo.n * geo.c * geo.h * geo.w];
        geo.for_each(|d, s| dx[s] += gd[d]);
        vec![Some(Tensor::new(&xs, dx).expect("shape"))]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    fn ramp() -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64)
    }

    #[test]
    fn k1_is_identity_with_unit_slot_axis() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(ramp());
        let u = unfold(x, &FootprintSpec::same(1).unwrap()).unwrap();
        assert_eq!(u.shape(), vec![1, 1, 1, 3, 3]);
        assert_eq!(u.value().data(), ramp().data());
    }

    #[test]
    fn center_pixel_sees_row_major_neighbourhood() {
        let tape = Tape::<f64>::new();
        let u = unfold(tape.constant(ramp()), &FootprintSpec::same(3).unwrap()).unwrap().value();
        let center: Vec<f64> = (0..9).map(|s| u.at(&[0, 0, s, 1, 1])).collect();
        assert_eq!(center, (0..9).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn corner_pixel_has_padded_zeros() {
        // hand-padded oracle: top-left pixel sees
        // [pad pad pad; pad 0 1; pad 3 4]
        let tape = Tape::<f64>::new();
        let u = unfold(tape.constant(ramp()), &FootprintSpec::same(3).unwrap()).unwrap().value();
        let corner: Vec<f64> = (0..9).map(|s| u.at(&[0, 0, s, 0, 0])).collect();
        assert_eq!(corner, vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 3.0, 4.0]);
        assert_eq!(corner.iter().filter(|&&v| v == 0.0).count(), 6);
        // five slots are out of bounds, the in-bounds one holding 0.0 is pixel 0
        let oob = (0..9)
            .filter(|&s| {
                let (dy, dx) = FootprintSpec::same(3).unwrap().slot_offset(s);
                dy < 0 || dx < 0
            })
            .count();
        assert_eq!(oob, 5);
    }

    #[test]
    fn even_footprint_rejected() {
        assert!(FootprintSpec::same(4).is_err());
        assert!(FootprintSpec::same(0).is_err());
    }

    #[test]
    fn strided_output_extent() {
        let fp = FootprintSpec::strided(3, 2).unwrap();
        assert_eq!(fp.output_extent(8), 4);
        let tape = Tape::<f32>::new();
        let u = unfold(tape.constant(Tensor::zeros(&[1, 2, 8, 8])), &fp).unwrap();
        assert_eq!(u.shape(), vec![1, 2, 9, 4, 4]);
    }
}
