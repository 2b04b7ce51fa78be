//! im2col convolution kernels. Column layout: row `(ci * k + ky) * k + kx`,
//! column `oy * out_w + ox`.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pixels = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * pixels];
    let pad = g.padding as isize;
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatters column adjoints back onto the input plane (adjoint of [`im2col`]).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pixels = oh * ow;
    let mut input = vec![0.0; g.c_in * g.h * g.w];
    let pad = g.padding as isize;
    for ci in 0..g.c_in {
        let plane = &mut input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    input
}

/// `c (m×n) = a (m×k) · b (k×n)` with explicit strides, overwriting `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index addressed through the strides lies inside the
    // slices: a has m*k elements, b has k*n, c has m*n, all checked above or
    // by construction at the call sites.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(cols: &[f64], kernel: &[f64], bias: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (m, k, n) = (g.c_out, g.patch_len(), g.out_pixels());
    assert_eq!(kernel.len(), m * k);
    assert_eq!(cols.len(), k * n);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, kernel, (k, 1), cols, (n, 1), &mut out);
    for (row, b) in out.chunks_exact_mut(n).zip(bias) {
        for v in row {
            *v += b;
        }
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; each is only computed when requested.
pub(crate) fn backward(
    upstream: &[f64],
    cols: &[f64],
    kernel: &[f64],
    g: &ConvGeometry,
    need: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (m, k, n) = (g.c_out, g.patch_len(), g.out_pixels());
    let d_input = need.0.then(|| {
        let mut d_cols = vec![0.0; k * n];
        // kernelᵀ (k×m) · upstream (m×n)
        gemm(k, m, n, kernel, (1, k), upstream, (n, 1), &mut d_cols);
        col2im(&d_cols, g)
    });
    let d_kernel = need.1.then(|| {
        let mut dk = vec![0.0; m * k];
        // upstream (m×n) · colsᵀ (n×k)
        gemm(m, n, k, upstream, (n, 1), cols, (1, n), &mut dk);
        dk
    });
    let d_bias = need.2.then(|| {
        upstream
            .chunks_exact(n)
            .map(|row| row.iter().sum::<f64>())
            .collect()
    });
    (d_input, d_kernel, d_bias)
}
