//! AVX-512 fast path for stride-1 3x3 convolutions with padding == dilation.
//!
//! Every predictor layer and the larger autoencoder decoder layers match this
//! pattern, and they dominate training time. The input is copied once into a
//! zero-padded plane buffer (vertical and horizontal margins plus 16 lanes of
//! slack), after which all nine taps become unaligned row loads with no edge
//! masking on the load side; only stores at a ragged row end are masked.
//!
//! The generic im2col path in `conv` remains the reference implementation and
//! the fallback for every other geometry, for `f64`, and for CPUs without
//! AVX-512. Results are bit-deterministic for a fixed code path.

#![allow(clippy::needless_range_loop)]

use crate::conv::ConvGeom;
use crate::dense::DenseArray;
use crate::scalar::Scalar;
use std::any::Any;

const O_TILE: usize = 8;

fn geometry_ok(g: &ConvGeom) -> bool {
    g.stride == 1 && g.kh == 3 && g.kw == 3 && g.padding == g.dilation && g.out_w >= 16
}

#[cfg(target_arch = "x86_64")]
fn cpu_ok() -> bool {
    is_x86_feature_detected!("avx512f")
}

#[cfg(not(target_arch = "x86_64"))]
fn cpu_ok() -> bool {
    false
}

/// Try the fast forward path; `None` means the caller must use im2col.
pub(crate) fn forward_any<T: Scalar>(
    input: &DenseArray<T>,
    kernel: &DenseArray<T>,
    g: &ConvGeom,
) -> Option<DenseArray<T>> {
    if !geometry_ok(g) || !cpu_ok() {
        return None;
    }
    let x = (input as &dyn Any).downcast_ref::<DenseArray<f32>>()?;
    let w = (kernel as &dyn Any).downcast_ref::<DenseArray<f32>>()?;
    let out = forward_f32(x, w, g);
    let boxed: Box<dyn Any> = Box::new(out);
    Some(*boxed.downcast::<DenseArray<T>>().ok()?)
}

/// Try the fast backward path.
pub(crate) fn backward_any<T: Scalar>(
    input: &DenseArray<T>,
    kernel: &DenseArray<T>,
    g: &ConvGeom,
    grad_out: &DenseArray<T>,
    need_input: bool,
    need_kernel: bool,
) -> Option<(Option<DenseArray<T>>, Option<DenseArray<T>>)> {
    if !geometry_ok(g) || !cpu_ok() {
        return None;
    }
    let x = (input as &dyn Any).downcast_ref::<DenseArray<f32>>()?;
    let w = (kernel as &dyn Any).downcast_ref::<DenseArray<f32>>()?;
    let gy = (grad_out as &dyn Any).downcast_ref::<DenseArray<f32>>()?;
    let (gx, gw) = backward_f32(x, w, g, gy, need_input, need_kernel);
    let cast = |v: Option<DenseArray<f32>>| -> Option<DenseArray<T>> {
        v.map(|a| {
            let boxed: Box<dyn Any> = Box::new(a);
            *boxed.downcast::<DenseArray<T>>().expect("T is f32 here")
        })
    };
    Some((cast(gx), cast(gw)))
}

struct PadGeom {
    h: usize,
    w: usize,
    d: usize,
    /// padded row length, with 16 lanes of slack for unmasked loads
    wp: usize,
    /// padded plane length
    plane: usize,
}

impl PadGeom {
    fn new(h: usize, w: usize, d: usize) -> Self {
        let wp = w + 2 * d + 16;
        PadGeom {
            h,
            w,
            d,
            wp,
            plane: (h + 2 * d) * wp,
        }
    }
    /// Flat offset of original pixel (y, x) inside a padded plane.
    fn at(&self, y: usize, x: usize) -> usize {
        (y + self.d) * self.wp + x + self.d
    }
}

/// Copy `channels` planes of (h x w) into zero-padded storage.
fn pad_planes(src: &[f32], channels: usize, pg: &PadGeom, dst: &mut Vec<f32>) {
    dst.clear();
    dst.resize(channels * pg.plane, 0.0);
    for c in 0..channels {
        for y in 0..pg.h {
            let s = &src[(c * pg.h + y) * pg.w..(c * pg.h + y + 1) * pg.w];
            let base = c * pg.plane + pg.at(y, 0);
            dst[base..base + pg.w].copy_from_slice(s);
        }
    }
}

fn forward_f32(x: &DenseArray<f32>, w: &DenseArray<f32>, g: &ConvGeom) -> DenseArray<f32> {
    let mut out: DenseArray<f32> = DenseArray::zeros(g.out_shape());
    let pg = PadGeom::new(g.in_h, g.in_w, g.dilation);
    let (c_in, c_out) = (g.in_channels, g.out_channels);
    let in_sample = c_in * g.in_h * g.in_w;
    let out_sample = c_out * g.out_h * g.out_w;
    let mut xpad = Vec::new();

    // per-tile weight repack: wt[(c * 9 + tap) * 8 + oi]
    let tiles: Vec<(usize, usize, Vec<f32>)> = (0..c_out)
        .step_by(O_TILE)
        .map(|o0| {
            let to = O_TILE.min(c_out - o0);
            let mut wt = vec![0.0f32; c_in * 9 * O_TILE];
            for c in 0..c_in {
                for tap in 0..9 {
                    for oi in 0..to {
                        wt[(c * 9 + tap) * O_TILE + oi] =
                            w.data()[((o0 + oi) * c_in + c) * 9 + tap];
                    }
                }
            }
            (o0, to, wt)
        })
        .collect();

    for n in 0..g.batch {
        pad_planes(
            &x.data()[n * in_sample..(n + 1) * in_sample],
            c_in,
            &pg,
            &mut xpad,
        );
        for (o0, to, wt) in &tiles {
            let mut out_ptrs = [std::ptr::null_mut(); O_TILE];
            for oi in 0..*to {
                out_ptrs[oi] = unsafe {
                    out.data_mut()
                        .as_mut_ptr()
                        .add(n * out_sample + (o0 + oi) * g.out_h * g.out_w)
                };
            }
            unsafe {
                tile_pass(&xpad, c_in, &pg, wt, *to, &out_ptrs);
            }
        }
    }
    out
}

fn backward_f32(
    x: &DenseArray<f32>,
    w: &DenseArray<f32>,
    g: &ConvGeom,
    gy: &DenseArray<f32>,
    need_input: bool,
    need_kernel: bool,
) -> (Option<DenseArray<f32>>, Option<DenseArray<f32>>) {
    let (c_in, c_out) = (g.in_channels, g.out_channels);
    let pg = PadGeom::new(g.in_h, g.in_w, g.dilation);
    let in_sample = c_in * g.in_h * g.in_w;
    let out_sample = c_out * g.out_h * g.out_w;

    let mut grad_input: Option<DenseArray<f32>> =
        need_input.then(|| DenseArray::zeros(x.shape()));
    let mut grad_kernel: Option<DenseArray<f32>> =
        need_kernel.then(|| DenseArray::zeros(w.shape()));

    // dX is a 3x3 stride-1 convolution of dY with the tap-flipped, transposed
    // kernel, so it reuses the forward tile kernel with roles swapped.
    let tiles: Vec<(usize, usize, Vec<f32>)> = if need_input {
        (0..c_in)
            .step_by(O_TILE)
            .map(|c0| {
                let tc = O_TILE.min(c_in - c0);
                let mut wt = vec![0.0f32; c_out * 9 * O_TILE];
                for o in 0..c_out {
                    for tap in 0..9 {
                        for ci in 0..tc {
                            wt[(o * 9 + tap) * O_TILE + ci] =
                                w.data()[(o * c_in + c0 + ci) * 9 + (8 - tap)];
                        }
                    }
                }
                (c0, tc, wt)
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut gypad = Vec::new();
    let mut xpad = Vec::new();
    for n in 0..g.batch {
        if need_input || need_kernel {
            // padding dY serves both dX (as conv source) and dW (aligned taps)
            pad_planes(
                &gy.data()[n * out_sample..(n + 1) * out_sample],
                c_out,
                &pg,
                &mut gypad,
            );
        }
        if need_input {
            let gi = grad_input.as_mut().unwrap();
            for (c0, tc, wt) in &tiles {
                let mut out_ptrs = [std::ptr::null_mut(); O_TILE];
                for ci in 0..*tc {
                    out_ptrs[ci] = unsafe {
                        gi.data_mut()
                            .as_mut_ptr()
                            .add(n * in_sample + (c0 + ci) * g.in_h * g.in_w)
                    };
                }
                unsafe {
                    tile_pass(&gypad, c_out, &pg, wt, *tc, &out_ptrs);
                }
            }
        }
        if need_kernel {
            pad_planes(
                &x.data()[n * in_sample..(n + 1) * in_sample],
                c_in,
                &pg,
                &mut xpad,
            );
            unsafe {
                grad_kernel_pass(
                    &gy.data()[n * out_sample..(n + 1) * out_sample],
                    &xpad,
                    c_out,
                    c_in,
                    &pg,
                    grad_kernel.as_mut().unwrap().data_mut(),
                );
            }
        }
    }
    (grad_input, grad_kernel)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn tile_pass(
    src_pad: &[f32],
    c_in: usize,
    pg: &PadGeom,
    wt: &[f32],
    to: usize,
    out_ptrs: &[*mut f32; O_TILE],
) {
    use std::arch::x86_64::*;
    let (h, w, d, wp) = (pg.h, pg.w, pg.d, pg.wp);
    let sp = src_pad.as_ptr();
    for y in 0..h {
        let mut xb = 0usize;
        while xb < w {
            let rem = w - xb;
            let full = rem >= 32;
            let m0: u16 = if rem >= 16 { !0 } else { (1u16 << rem) - 1 };
            let m1: u16 = if rem >= 32 {
                !0
            } else if rem > 16 {
                (1u16 << (rem - 16)) - 1
            } else {
                0
            };
            // the accumulator loops run over the full tile with zero-padded
            // weights so every bound is a constant and the arrays stay in
            // registers
            let mut acc0 = [_mm512_setzero_ps(); O_TILE];
            let mut acc1 = [_mm512_setzero_ps(); O_TILE];
            for c in 0..c_in {
                let cbase = sp.add(c * pg.plane);
                for ky in 0..3 {
                    let row = cbase.add((y + ky * d) * wp);
                    for kx in 0..3 {
                        let p = row.add(xb + kx * d);
                        let v0 = _mm512_loadu_ps(p);
                        let v1 = _mm512_loadu_ps(p.add(16));
                        let wrow = wt.as_ptr().add((c * 9 + ky * 3 + kx) * O_TILE);
                        for oi in 0..O_TILE {
                            let wv = _mm512_set1_ps(*wrow.add(oi));
                            acc0[oi] = _mm512_fmadd_ps(v0, wv, acc0[oi]);
                            acc1[oi] = _mm512_fmadd_ps(v1, wv, acc1[oi]);
                        }
                    }
                }
            }
            for oi in 0..to {
                let dst = out_ptrs[oi].add(y * w + xb);
                if full {
                    _mm512_storeu_ps(dst, acc0[oi]);
                    _mm512_storeu_ps(dst.add(16), acc1[oi]);
                } else {
                    _mm512_mask_storeu_ps(dst, m0, acc0[oi]);
                    if m1 != 0 {
                        _mm512_mask_storeu_ps(dst.add(16), m1, acc1[oi]);
                    }
                }
            }
            xb += 32;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn grad_kernel_pass(
    gy_sample: &[f32],
    xpad: &[f32],
    c_out: usize,
    c_in: usize,
    pg: &PadGeom,
    gw: &mut [f32],
) {
    use std::arch::x86_64::*;
    let (h, w, d, wp) = (pg.h, pg.w, pg.d, pg.wp);
    let xp = xpad.as_ptr();
    let mut o0 = 0usize;
    while o0 < c_out {
        let t = 2.min(c_out - o0);
        // a lone trailing output channel reads its own row twice; acc[1] is
        // discarded, which keeps the inner loop branch-free
        let o1 = if t > 1 { o0 + 1 } else { o0 };
        for c in 0..c_in {
            let cbase = xp.add(c * pg.plane);
            let mut acc = [[_mm512_setzero_ps(); 9]; 2];
            for y in 0..h {
                let dy0 = gy_sample.as_ptr().add((o0 * h + y) * w);
                let dy1 = gy_sample.as_ptr().add((o1 * h + y) * w);
                let mut xb = 0usize;
                while xb < w {
                    let rem = w - xb;
                    let m: u16 = if rem >= 16 { !0 } else { (1u16 << rem) - 1 };
                    let g0 = _mm512_maskz_loadu_ps(m, dy0.add(xb));
                    let g1 = _mm512_maskz_loadu_ps(m, dy1.add(xb));
                    for ky in 0..3 {
                        let row = cbase.add((y + ky * d) * wp);
                        for kx in 0..3 {
                            let v = _mm512_loadu_ps(row.add(xb + kx * d));
                            let tap = ky * 3 + kx;
                            acc[0][tap] = _mm512_fmadd_ps(g0, v, acc[0][tap]);
                            acc[1][tap] = _mm512_fmadd_ps(g1, v, acc[1][tap]);
                        }
                    }
                    xb += 16;
                }
            }
            for ti in 0..t {
                for tap in 0..9 {
                    let idx = ((o0 + ti) * c_in + c) * 9 + tap;
                    gw[idx] += _mm512_reduce_add_ps(acc[ti][tap]);
                }
            }
        }
        o0 += 2;
    }
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn tile_pass(
    _src_pad: &[f32],
    _c_in: usize,
    _pg: &PadGeom,
    _wt: &[f32],
    _to: usize,
    _out_ptrs: &[*mut f32; O_TILE],
) {
    unreachable!("fast conv path is gated on x86_64")
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn grad_kernel_pass(
    _gy_sample: &[f32],
    _xpad: &[f32],
    _c_out: usize,
    _c_in: usize,
    _pg: &PadGeom,
    _gw: &mut [f32],
) {
    unreachable!("fast conv path is gated on x86_64")
}
