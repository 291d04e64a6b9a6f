//! Convolution kernels (im2col + gemm) used by the tape.

/// Spatial bookkeeping of one convolution application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Non-overlapping `stride x stride` patches; the input is zero padded on
    /// the bottom/right so the output is `ceil(in / stride)`.
    pub fn patchify(stride: usize, in_h: usize, in_w: usize) -> Self {
        Self {
            kernel: stride,
            stride,
            pad_top: 0,
            pad_left: 0,
            in_h,
            in_w,
            out_h: in_h.div_ceil(stride),
            out_w: in_w.div_ceil(stride),
        }
    }

    /// Stride-1, odd kernel, output size equal to input size.
    pub fn same(kernel: usize, in_h: usize, in_w: usize) -> Self {
        debug_assert!(kernel % 2 == 1);
        Self {
            kernel,
            stride: 1,
            pad_top: kernel / 2,
            pad_left: kernel / 2,
            in_h,
            in_w,
            out_h: in_h,
            out_w: in_w,
        }
    }

    #[inline]
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    #[inline]
    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `x` (`cin x in_h x in_w`) into a `(cin*k*k) x (out_h*out_w)` matrix.
pub fn im2col(x: &[f64], cin: usize, g: &ConvGeometry) -> Vec<f64> {
    let k = g.kernel;
    let p = g.out_len();
    let mut cols = vec![0.0; cin * k * k * p];
    for c in 0..cin {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im(cols: &[f64], cin: usize, g: &ConvGeometry, dx: &mut [f64]) {
    let k = g.kernel;
    let p = g.out_len();
    for c in 0..cin {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)`, with optional transposes of
/// the row-major operands.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], cin: usize, w: &[f64], cout: usize, g: &ConvGeometry) -> Vec<f64> {
        let k = g.kernel;
        let mut out = vec![0.0; cout * g.out_len()];
        for o in 0..cout {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += w[((o * cin + c) * k + ky) * k + kx]
                                    * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(o * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let cin = 3;
        let cout = 5;
        for g in [ConvGeometry::patchify(4, 10, 7), ConvGeometry::same(3, 6, 5), ConvGeometry::patchify(2, 5, 5)] {
            let x: Vec<f64> = (0..cin * g.in_h * g.in_w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let kk = cin * g.kernel * g.kernel;
            let w: Vec<f64> = (0..cout * kk).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let cols = im2col(&x, cin, &g);
            let mut out = vec![0.0; cout * g.out_len()];
            gemm(cout, kk, g.out_len(), &w, false, &cols, false, 0.0, &mut out);
            let expect = naive_conv(&x, cin, &w, cout, &g);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry::same(3, 4, 6);
        let cin = 2;
        let x: Vec<f64> = (0..cin * 24).map(|i| (i as f64).sin()).collect();
        let cols = im2col(&x, cin, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut back = vec![0.0; x.len()];
        col2im(&y, cin, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn patchify_uses_ceiling_output_size() {
        let g = ConvGeometry::patchify(4, 51, 64);
        assert_eq!((g.out_h, g.out_w), (13, 16));
    }
}
