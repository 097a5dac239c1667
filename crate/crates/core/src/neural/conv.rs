//! 2D cross-correlation via chunked im2col and dense matrix products.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Upper bound on im2col buffer entries per chunk.
const COL_BUDGET: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Zero padding before / after along each spatial axis.
    pub pad: (usize, usize),
}

impl ConvSpec {
    /// Padding chosen so the output is exactly `input / stride` for inputs
    /// divisible by the stride. Even kernels pad one more after than before.
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let total = kernel.saturating_sub(stride);
        Self { in_ch, out_ch, kernel, stride, pad: (total / 2, total - total / 2) }
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    pub fn out_size(&self, h: usize) -> Result<usize> {
        let padded = h + self.pad.0 + self.pad.1;
        if padded < self.kernel || self.stride == 0 {
            return Err(Error::shape(format!("input {h} too small for kernel {}", self.kernel)));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    fn check(&self, x: &Tensor, w: &[f64]) -> Result<(usize, usize)> {
        if x.channels() != self.in_ch {
            return Err(Error::shape(format!("conv expects {} channels, got {}", self.in_ch, x.channels())));
        }
        if w.len() != self.weight_len() {
            return Err(Error::shape(format!("conv weights: {} values, expected {}", w.len(), self.weight_len())));
        }
        Ok((self.out_size(x.height())?, self.out_size(x.width())?))
    }

    fn rows_per_chunk(&self, wo: usize) -> usize {
        let per_row = self.in_ch * self.kernel * self.kernel * wo;
        (COL_BUDGET / per_row.max(1)).max(1)
    }

    /// Fills `cols` ((in_ch * k * k) x (rows * wo)) for output rows `r0..r1`.
    fn im2col(&self, x: &Tensor, wo: usize, r0: usize, r1: usize, cols: &mut [f64]) {
        let (h, w) = (x.height() as isize, x.width() as isize);
        let k = self.kernel;
        let ncols = (r1 - r0) * wo;
        let lo = self.pad.0 as isize;
        let s = self.stride as isize;
        for ci in 0..self.in_ch {
            let src = x.channel(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * ncols..][..ncols];
                    for (oi, orow) in (r0..r1).enumerate() {
                        let iy = orow as isize * s + ky as isize - lo;
                        let dst = &mut row[oi * wo..(oi + 1) * wo];
                        if iy < 0 || iy >= h {
                            dst.fill(0.0);
                            continue;
                        }
                        let base = iy as usize * w as usize;
                        for (oc, d) in dst.iter_mut().enumerate() {
                            let ix = oc as isize * s + kx as isize - lo;
                            *d = if ix < 0 || ix >= w { 0.0 } else { src[base + ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, dx: &mut Tensor, wo: usize, r0: usize, r1: usize, cols: &[f64]) {
        let (h, w) = (dx.height() as isize, dx.width() as isize);
        let plane = dx.plane();
        let k = self.kernel;
        let ncols = (r1 - r0) * wo;
        let lo = self.pad.0 as isize;
        let s = self.stride as isize;
        let data = dx.data_mut();
        for ci in 0..self.in_ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * ncols..][..ncols];
                    for (oi, orow) in (r0..r1).enumerate() {
                        let iy = orow as isize * s + ky as isize - lo;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let base = ci * plane + iy as usize * w as usize;
                        for (oc, v) in row[oi * wo..(oi + 1) * wo].iter().enumerate() {
                            let ix = oc as isize * s + kx as isize - lo;
                            if ix >= 0 && ix < w {
                                data[base + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the debug assertions above spell out the index bounds; every
    // caller passes slices that cover the strided extents.
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
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Cross-correlation with zero padding. `w` is `out x in x k x k`.
pub fn conv2d(x: &Tensor, w: &[f64], b: &[f64], spec: &ConvSpec) -> Result<Tensor> {
    let (ho, wo) = spec.check(x, w)?;
    if b.len() != spec.out_ch {
        return Err(Error::shape(format!("conv bias: {} values, expected {}", b.len(), spec.out_ch)));
    }
    let ckk = spec.in_ch * spec.kernel * spec.kernel;
    let plane = ho * wo;
    let mut y = Tensor::zeros(spec.out_ch, ho, wo);
    {
        let data = y.data_mut();
        for (o, bias) in b.iter().enumerate() {
            data[o * plane..(o + 1) * plane].fill(*bias);
        }
    }
    let chunk = spec.rows_per_chunk(wo);
    let mut cols = vec![0.0; ckk * chunk.min(ho) * wo];
    let mut r0 = 0;
    while r0 < ho {
        let r1 = (r0 + chunk).min(ho);
        let ncols = (r1 - r0) * wo;
        spec.im2col(x, wo, r0, r1, &mut cols[..ckk * ncols]);
        gemm(
            spec.out_ch,
            ckk,
            ncols,
            w,
            (ckk, 1),
            &cols[..ckk * ncols],
            (ncols, 1),
            1.0,
            &mut y.data_mut()[r0 * wo..],
            (plane, 1),
        );
        r0 = r1;
    }
    Ok(y)
}

/// Gradients of a convolution: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(x: &Tensor, w: &[f64], spec: &ConvSpec, dy: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (ho, wo) = spec.check(x, w)?;
    if dy.shape() != (spec.out_ch, ho, wo) {
        return Err(Error::shape(format!(
            "conv output gradient {:?}, expected {:?}",
            dy.shape(),
            (spec.out_ch, ho, wo)
        )));
    }
    let ckk = spec.in_ch * spec.kernel * spec.kernel;
    let plane = ho * wo;
    let db: Vec<f64> = (0..spec.out_ch).map(|o| dy.channel(o).iter().sum()).collect();
    let mut dw = vec![0.0; w.len()];
    let mut dx = Tensor::zeros(x.channels(), x.height(), x.width());
    let chunk = spec.rows_per_chunk(wo);
    let mut cols = vec![0.0; ckk * chunk.min(ho) * wo];
    let mut dcols = vec![0.0; ckk * chunk.min(ho) * wo];
    let mut r0 = 0;
    while r0 < ho {
        let r1 = (r0 + chunk).min(ho);
        let ncols = (r1 - r0) * wo;
        let dy_chunk = &dy.data()[r0 * wo..];
        spec.im2col(x, wo, r0, r1, &mut cols[..ckk * ncols]);
        // dW += dY_chunk * cols^T
        gemm(spec.out_ch, ncols, ckk, dy_chunk, (plane, 1), &cols[..ckk * ncols], (1, ncols), 1.0, &mut dw, (ckk, 1));
        // dcols = W^T * dY_chunk
        gemm(ckk, spec.out_ch, ncols, w, (1, ckk), dy_chunk, (plane, 1), 0.0, &mut dcols[..ckk * ncols], (ncols, 1));
        spec.col2im(&mut dx, wo, r0, r1, &dcols[..ckk * ncols]);
        r0 = r1;
    }
    Ok((dx, dw, db))
}
