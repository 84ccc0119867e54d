//! 2-d cross-correlation with stride, dilation, and zero padding.
//!
//! Forward and backward passes lower onto GEMM through a blocked im2col so
//! the dilated predictor stack stays fast on a single core. Column buffers
//! are rebuilt in the backward pass instead of cached; the rebuild is cheap
//! next to the matrix products and keeps peak memory flat.

use crate::dense::{DenseArray, Shape};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Resolved geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn infer(
        input: Shape,
        kernel: Shape,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.ndim() != 4 {
            return Err(Error::config(format!(
                "conv2d input must be (batch, channels, h, w), got {input}"
            )));
        }
        if kernel.ndim() != 4 {
            return Err(Error::config(format!(
                "conv2d kernel must be (out, in, kh, kw), got {kernel}"
            )));
        }
        if kernel.at(1) != input.at(1) {
            return Err(Error::config(format!(
                "kernel channel count does not match input: kernel {kernel}, input {input}"
            )));
        }
        if stride < 1 || dilation < 1 {
            return Err(Error::config(format!(
                "stride and dilation must be >= 1 (stride {stride}, dilation {dilation})"
            )));
        }
        let (h, w) = (input.at(2), input.at(3));
        let (kh, kw) = (kernel.at(2), kernel.at(3));
        let eff_h = dilation * (kh - 1) + 1;
        let eff_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < eff_h || w + 2 * padding < eff_w {
            return Err(Error::config(format!(
                "output extent would be < 1: input {input}, kernel {kernel}, \
                 stride {stride}, dilation {dilation}, padding {padding}"
            )));
        }
        Ok(ConvGeom {
            batch: input.at(0),
            in_channels: input.at(1),
            in_h: h,
            in_w: w,
            out_channels: kernel.at(0),
            kh,
            kw,
            stride,
            dilation,
            padding,
            out_h: (h + 2 * padding - eff_h) / stride + 1,
            out_w: (w + 2 * padding - eff_w) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Shape {
        Shape::d4(self.batch, self.out_channels, self.out_h, self.out_w)
    }

    fn k_rows(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    /// Output rows per im2col band, sized to keep the buffer around 8k columns.
    fn band_rows(&self) -> usize {
        (8192 / self.out_w).clamp(1, self.out_h)
    }
}

/// Fill `cols` (k_rows x band_len) for output rows [oy0, oy0+rows) of one sample.
fn im2col_band<T: Scalar>(g: &ConvGeom, sample: &[T], oy0: usize, rows: usize, cols: &mut [T]) {
    let band_len = rows * g.out_w;
    let (stride, dil, pad) = (g.stride, g.dilation, g.padding);
    for c in 0..g.in_channels {
        let plane = &sample[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[r * band_len..(r + 1) * band_len];
                for dy in 0..rows {
                    let oy = oy0 + dy;
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    let dst = &mut dst_row[dy * g.out_w..(dy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let x_base = kx as isize * dil as isize - pad as isize;
                    if stride == 1 {
                        // contiguous copy of the in-bounds run, zeros elsewhere
                        let lo = (-x_base).max(0) as usize;
                        let hi = ((g.in_w as isize - x_base).max(0) as usize).min(g.out_w);
                        dst[..lo.min(g.out_w)].fill(T::zero());
                        if hi > lo {
                            dst[lo..hi].copy_from_slice(
                                &src_row[(x_base + lo as isize) as usize
                                    ..(x_base + hi as isize) as usize],
                            );
                        }
                        dst[hi.max(lo).min(g.out_w)..].fill(T::zero());
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = ox as isize * stride as isize + x_base;
                            *d = if ix >= 0 && ix < g.in_w as isize {
                                src_row[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-gradient band back into the input gradient of one sample.
fn col2im_band<T: Scalar>(g: &ConvGeom, cols: &[T], oy0: usize, rows: usize, gx: &mut [T]) {
    let band_len = rows * g.out_w;
    let (stride, dil, pad) = (g.stride, g.dilation, g.padding);
    for c in 0..g.in_channels {
        let plane = &mut gx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[r * band_len..(r + 1) * band_len];
                for dy in 0..rows {
                    let oy = oy0 + dy;
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row =
                        &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src = &src_row[dy * g.out_w..(dy + 1) * g.out_w];
                    let x_base = kx as isize * dil as isize - pad as isize;
                    if stride == 1 {
                        let lo = (-x_base).max(0) as usize;
                        let hi = ((g.in_w as isize - x_base).max(0) as usize).min(g.out_w);
                        if hi > lo {
                            let dst = &mut dst_row
                                [(x_base + lo as isize) as usize..(x_base + hi as isize) as usize];
                            for (d, s) in dst.iter_mut().zip(&src[lo..hi]) {
                                *d = *d + *s;
                            }
                        }
                    } else {
                        for (ox, s) in src.iter().enumerate() {
                            let ix = ox as isize * stride as isize + x_base;
                            if ix >= 0 && ix < g.in_w as isize {
                                dst_row[ix as usize] = dst_row[ix as usize] + *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &DenseArray<T>,
    kernel: &DenseArray<T>,
    g: &ConvGeom,
) -> DenseArray<T> {
    if let Some(out) = crate::conv_fast::forward_any(input, kernel, g) {
        return out;
    }
    let mut out: DenseArray<T> = DenseArray::zeros(g.out_shape());
    let k_rows = g.k_rows();
    let band = g.band_rows();
    let mut cols = vec![T::zero(); k_rows * band * g.out_w];
    let in_sample = g.in_channels * g.in_h * g.in_w;
    let out_sample = g.out_channels * g.out_h * g.out_w;
    let out_plane = g.out_h * g.out_w;

    for n in 0..g.batch {
        let sample = &input.data()[n * in_sample..(n + 1) * in_sample];
        let mut oy0 = 0;
        while oy0 < g.out_h {
            let rows = band.min(g.out_h - oy0);
            let band_len = rows * g.out_w;
            im2col_band(g, sample, oy0, rows, &mut cols);
            // out[n, :, band] = kernel(O x K) @ cols(K x band_len)
            unsafe {
                T::gemm(
                    g.out_channels,
                    k_rows,
                    band_len,
                    T::one(),
                    kernel.data().as_ptr(),
                    k_rows as isize,
                    1,
                    cols.as_ptr(),
                    band_len as isize,
                    1,
                    T::zero(),
                    out.data_mut()
                        .as_mut_ptr()
                        .add(n * out_sample + oy0 * g.out_w),
                    out_plane as isize,
                    1,
                );
            }
            oy0 += rows;
        }
    }
    out
}

/// Gradients for input and kernel; either can be skipped.
pub fn conv2d_backward<T: Scalar>(
    input: &DenseArray<T>,
    kernel: &DenseArray<T>,
    g: &ConvGeom,
    grad_out: &DenseArray<T>,
    need_input: bool,
    need_kernel: bool,
) -> (Option<DenseArray<T>>, Option<DenseArray<T>>) {
    if let Some(r) =
        crate::conv_fast::backward_any(input, kernel, g, grad_out, need_input, need_kernel)
    {
        return r;
    }
    let k_rows = g.k_rows();
    let band = g.band_rows();
    let mut cols = vec![T::zero(); k_rows * band * g.out_w];
    let mut col_grad = vec![T::zero(); if need_input { k_rows * band * g.out_w } else { 0 }];
    let in_sample = g.in_channels * g.in_h * g.in_w;
    let out_sample = g.out_channels * g.out_h * g.out_w;
    let out_plane = g.out_h * g.out_w;

    let mut grad_input = need_input.then(|| DenseArray::zeros(input.shape()));
    let mut grad_kernel = need_kernel.then(|| DenseArray::zeros(kernel.shape()));

    for n in 0..g.batch {
        let sample = &input.data()[n * in_sample..(n + 1) * in_sample];
        let mut oy0 = 0;
        while oy0 < g.out_h {
            let rows = band.min(g.out_h - oy0);
            let band_len = rows * g.out_w;
            let gy_ptr = unsafe { grad_out.data().as_ptr().add(n * out_sample + oy0 * g.out_w) };
            if need_kernel {
                im2col_band(g, sample, oy0, rows, &mut cols);
                // dW(O x K) += dY(O x band) @ cols^T(band x K)
                unsafe {
                    T::gemm(
                        g.out_channels,
                        band_len,
                        k_rows,
                        T::one(),
                        gy_ptr,
                        out_plane as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        band_len as isize,
                        T::one(),
                        grad_kernel.as_mut().unwrap().data_mut().as_mut_ptr(),
                        k_rows as isize,
                        1,
                    );
                }
            }
            if need_input {
                // colgrad(K x band) = W^T(K x O) @ dY(O x band)
                unsafe {
                    T::gemm(
                        k_rows,
                        g.out_channels,
                        band_len,
                        T::one(),
                        kernel.data().as_ptr(),
                        1,
                        k_rows as isize,
                        gy_ptr,
                        out_plane as isize,
                        1,
                        T::zero(),
                        col_grad.as_mut_ptr(),
                        band_len as isize,
                        1,
                    );
                }
                let gx = &mut grad_input.as_mut().unwrap().data_mut()
                    [n * in_sample..(n + 1) * in_sample];
                col2im_band(g, &col_grad, oy0, rows, gx);
            }
            oy0 += rows;
        }
    }
    (grad_input, grad_kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop cross-correlation, the independent reference.
    fn conv_naive(input: &DenseArray<f64>, kernel: &DenseArray<f64>, g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_h * g.out_w];
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.in_channels {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize
                                        - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize
                                        - g.padding as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.in_h as isize
                                        || ix >= g.in_w as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((n * g.in_channels + c) * g.in_h
                                        + iy as usize)
                                        * g.in_w
                                        + ix as usize;
                                    let wi = ((o * g.in_channels + c) * g.kh + ky) * g.kw + kx;
                                    acc += input.data()[xi] * kernel.data()[wi];
                                }
                            }
                        }
                        out[((n * g.out_channels + o) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_array(shape: Shape, seed: u64) -> DenseArray<f64> {
        // small deterministic LCG; avoids pulling rng into this module's tests
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        DenseArray::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = rand_array(Shape::d4(1, 1, 4, 5), 7);
        let k = DenseArray::full(Shape::d4(1, 1, 1, 1), 1.0);
        let g = ConvGeom::infer(x.shape(), k.shape(), 1, 1, 0).unwrap();
        let y = conv2d_forward(&x, &k, &g);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let x = DenseArray::full(Shape::d4(1, 1, 3, 3), 1.0f64);
        let k = DenseArray::full(Shape::d4(1, 1, 3, 3), 1.0f64);
        let g = ConvGeom::infer(x.shape(), k.shape(), 1, 1, 0).unwrap();
        let y = conv2d_forward(&x, &k, &g);
        assert_eq!(y.shape().dims(), &[1, 1, 1, 1]);
        assert!((y.data()[0] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_across_geometries() {
        for &(c_in, c_out, h, w, k, stride, dil, pad) in &[
            (1usize, 1usize, 5usize, 5usize, 3usize, 1usize, 1usize, 1usize),
            (3, 4, 8, 6, 3, 2, 1, 1),
            (2, 3, 9, 9, 3, 1, 2, 2),
            (2, 2, 17, 13, 3, 1, 4, 4),
            (1, 2, 20, 20, 3, 1, 8, 8),
            (3, 5, 7, 7, 1, 1, 1, 0),
        ] {
            let x = rand_array(Shape::d4(2, c_in, h, w), 11);
            let kn = rand_array(Shape::d4(c_out, c_in, k, k), 13);
            let g = ConvGeom::infer(x.shape(), kn.shape(), stride, dil, pad).unwrap();
            let y = conv2d_forward(&x, &kn, &g);
            let want = conv_naive(&x, &kn, &g);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "geom {g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_naive_recomputation() {
        // dL/dx and dL/dW with L = sum(conv) equal convolution identities that
        // the naive path can verify by perturbation-free algebra: with dY = 1,
        // dW[o,c,ky,kx] = sum over valid (oy,ox) of x at the tap position.
        let x = rand_array(Shape::d4(1, 2, 6, 6), 3);
        let k = rand_array(Shape::d4(3, 2, 3, 3), 5);
        let g = ConvGeom::infer(x.shape(), k.shape(), 1, 2, 2).unwrap();
        let gy = rand_array(g.out_shape(), 9);
        let (gx, gw) = conv2d_backward(&x, &k, &g, &gy, true, true);
        let (gx, gw) = (gx.unwrap(), gw.unwrap());

        // numeric check of a few entries via central differences on f64
        let f = |input: &DenseArray<f64>, kernel: &DenseArray<f64>| -> f64 {
            conv2d_forward(input, kernel, &g)
                .data()
                .iter()
                .zip(gy.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let eps = 1e-6;
        for idx in [0usize, 17, 41] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (f(&xp, &k) - f(&xm, &k)) / (2.0 * eps);
            assert!((fd - gx.data()[idx]).abs() < 1e-6, "gx[{idx}]: {fd} vs {}", gx.data()[idx]);
        }
        for idx in [0usize, 13, 53] {
            let mut kp = k.clone();
            kp.data_mut()[idx] += eps;
            let mut km = k.clone();
            km.data_mut()[idx] -= eps;
            let fd = (f(&x, &kp) - f(&x, &km)) / (2.0 * eps);
            assert!((fd - gw.data()[idx]).abs() < 1e-6, "gw[{idx}]: {fd} vs {}", gw.data()[idx]);
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = DenseArray::<f32>::zeros(Shape::d4(1, 3, 8, 8));
        let k = DenseArray::<f32>::zeros(Shape::d4(4, 2, 3, 3));
        let err = ConvGeom::infer(x.shape(), k.shape(), 1, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 2, 3, 3]") && msg.contains("[1, 3, 8, 8]"), "{msg}");
    }

    #[test]
    fn degenerate_output_rejected() {
        let x = DenseArray::<f32>::zeros(Shape::d4(1, 1, 3, 3));
        let k = DenseArray::<f32>::zeros(Shape::d4(1, 1, 3, 3));
        assert!(ConvGeom::infer(x.shape(), k.shape(), 1, 4, 0).is_err());
    }
}
