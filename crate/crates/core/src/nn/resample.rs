//! Separable linear resampling (resize, flip, crop, and their inverses).
//!
//! A [`ResampleMap`] is the product of a row map and a column map. Each output
//! index along an axis reads at most two input indices; output positions
//! without a source are invalid and produce zeros.

/// Two-tap interpolation along one axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisTap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

impl AxisTap {
    pub fn single(i: usize) -> Self {
        Self { i0: i, i1: i, w0: 1.0, w1: 0.0 }
    }

    /// Linear interpolation at continuous position `pos`, clamped to `[0, len-1]`.
    pub fn linear(pos: f64, len: usize) -> Self {
        let max = (len - 1) as f64;
        let p = pos.clamp(0.0, max);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        let frac = p - i0 as f64;
        Self { i0, i1, w0: 1.0 - frac, w1: frac }
    }
}

/// One-dimensional resampling: `out[j] = w0 * in[i0] + w1 * in[i1]` or invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMap {
    pub in_len: usize,
    pub taps: Vec<Option<AxisTap>>,
}

impl AxisMap {
    pub fn identity(len: usize) -> Self {
        Self { in_len: len, taps: (0..len).map(|i| Some(AxisTap::single(i))).collect() }
    }

    #[inline]
    pub fn out_len(&self) -> usize {
        self.taps.len()
    }

    /// Bilinear (half-pixel centers) resize from `in_len` to `out_len`.
    pub fn linear_resize(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|j| Some(AxisTap::linear((j as f64 + 0.5) * scale - 0.5, in_len)))
            .collect();
        Self { in_len, taps }
    }

    /// Nearest-neighbour resize: `out[j] = in[floor((j + 0.5) * in/out)]`.
    pub fn nearest_resize(in_len: usize, out_len: usize) -> Self {
        let taps = (0..out_len).map(|j| Some(AxisTap::single(nearest_source(j, in_len, out_len)))).collect();
        Self { in_len, taps }
    }
}

/// Source index used by nearest-neighbour resizing.
#[inline]
pub fn nearest_source(j: usize, in_len: usize, out_len: usize) -> usize {
    (((j as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
}

/// Separable 2-D resampling applied identically to every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleMap {
    pub rows: AxisMap,
    pub cols: AxisMap,
}

impl ResampleMap {
    pub fn new(rows: AxisMap, cols: AxisMap) -> Self {
        Self { rows, cols }
    }

    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self { rows: AxisMap::linear_resize(in_h, out_h), cols: AxisMap::linear_resize(in_w, out_w) }
    }

    pub fn identity(h: usize, w: usize) -> Self {
        Self { rows: AxisMap::identity(h), cols: AxisMap::identity(w) }
    }

    #[inline]
    pub fn in_shape(&self) -> (usize, usize) {
        (self.rows.in_len, self.cols.in_len)
    }

    #[inline]
    pub fn out_shape(&self) -> (usize, usize) {
        (self.rows.out_len(), self.cols.out_len())
    }

    pub fn validity(&self) -> Vec<bool> {
        let mut v = Vec::with_capacity(self.rows.out_len() * self.cols.out_len());
        for r in &self.rows.taps {
            for c in &self.cols.taps {
                v.push(r.is_some() && c.is_some());
            }
        }
        v
    }

    /// Resamples `channels` planes stored contiguously in `input`.
    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let (ih, iw) = self.in_shape();
        let (oh, ow) = self.out_shape();
        assert_eq!(input.len(), channels * ih * iw);
        let mut out = vec![0.0; channels * oh * ow];
        for c in 0..channels {
            let src = &input[c * ih * iw..(c + 1) * ih * iw];
            let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for (y, rt) in self.rows.taps.iter().enumerate() {
                let Some(rt) = rt else { continue };
                let r0 = &src[rt.i0 * iw..(rt.i0 + 1) * iw];
                let r1 = &src[rt.i1 * iw..(rt.i1 + 1) * iw];
                for (x, ct) in self.cols.taps.iter().enumerate() {
                    let Some(ct) = ct else { continue };
                    let top = ct.w0 * r0[ct.i0] + ct.w1 * r0[ct.i1];
                    let bottom = if rt.w1 == 0.0 { 0.0 } else { ct.w0 * r1[ct.i0] + ct.w1 * r1[ct.i1] };
                    dst[y * ow + x] = rt.w0 * top + rt.w1 * bottom;
                }
            }
        }
        out
    }

    /// Adjoint of [`ResampleMap::apply`], accumulated into `grad_in`.
    pub fn apply_adjoint(&self, grad_out: &[f64], channels: usize, grad_in: &mut [f64]) {
        let (ih, iw) = self.in_shape();
        let (oh, ow) = self.out_shape();
        assert_eq!(grad_out.len(), channels * oh * ow);
        for c in 0..channels {
            let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
            let dst = &mut grad_in[c * ih * iw..(c + 1) * ih * iw];
            for (y, rt) in self.rows.taps.iter().enumerate() {
                let Some(rt) = rt else { continue };
                for (x, ct) in self.cols.taps.iter().enumerate() {
                    let Some(ct) = ct else { continue };
                    let v = g[y * ow + x];
                    if v == 0.0 {
                        continue;
                    }
                    let a = rt.w0 * v;
                    dst[rt.i0 * iw + ct.i0] += a * ct.w0;
                    dst[rt.i0 * iw + ct.i1] += a * ct.w1;
                    if rt.w1 != 0.0 {
                        let b = rt.w1 * v;
                        dst[rt.i1 * iw + ct.i0] += b * ct.w0;
                        dst[rt.i1 * iw + ct.i1] += b * ct.w1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_resize_reproduces_affine_ramps_in_the_interior() {
        let m = ResampleMap::bilinear(8, 8, 16, 16);
        let input: Vec<f64> = (0..64).map(|i| 0.3 * (i / 8) as f64 + 0.1 * (i % 8) as f64).collect();
        let out = m.apply(&input, 1);
        for y in 1..15 {
            for x in 1..15 {
                let sy = (y as f64 + 0.5) * 0.5 - 0.5;
                let sx = (x as f64 + 0.5) * 0.5 - 0.5;
                assert!((out[y * 16 + x] - (0.3 * sy + 0.1 * sx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_matches_inner_products() {
        let m = ResampleMap::bilinear(5, 7, 9, 4);
        let x: Vec<f64> = (0..2 * 35).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..2 * 36).map(|i| (i as f64 * 0.3).cos()).collect();
        let ax = m.apply(&x, 2);
        let mut aty = vec![0.0; x.len()];
        m.apply_adjoint(&y, 2, &mut aty);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn nearest_resize_of_equal_length_is_identity() {
        let m = AxisMap::nearest_resize(13, 13);
        assert_eq!(m, AxisMap::identity(13));
    }
}
