//! Shared numeric kernels for the tape ops.
//!
//! All loops accumulate in row-major order so results are bit-reproducible.
//! The matmul variants accumulate into `out`; callers zero the buffer when
//! they want a plain product.

use alloc::vec;
use alloc::vec::Vec;

/// out[m×n] += a[m×k] · b[k×n]
pub fn matmul_nn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += aᵀ · b, with a stored as [k×m].
pub fn matmul_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a · bᵀ, with b stored as [n×k].
pub fn matmul_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// Geometry of one conv2d application (shared by forward and backward).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Spatial output size of a convolution along one axis, if positive.
pub fn conv_out_len(len: usize, k: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Unfold one image (C×H×W) into columns: cols[(c·k·k + ky·k + kx)·P + p]
/// where p indexes output positions. Out-of-bounds taps contribute zero.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(cols.len(), g.cols_rows() * g.out_positions());
    let p_total = g.out_positions();
    for c in 0..g.c_in {
        let chan = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * p_total..][..p_total];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back onto an image with scatter-add (adjoint of `im2col`).
pub fn col2im_acc(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    debug_assert_eq!(dx.len(), g.c_in * g.h * g.w);
    let p_total = g.out_positions();
    for c in 0..g.c_in {
        let chan = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * g.k + ky) * g.k + kx) * p_total..][..p_total];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis bilinear sampling table under the half-pixel-centers convention
/// (align-corners = false): src = (dst + 0.5) · in/out − 0.5, then the two
/// nearest taps are clamped into range while the weight is kept.
pub struct ResizeAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Weight of the `hi` tap; `lo` gets 1 − w.
    pub w_hi: Vec<f64>,
}

pub fn resize_axis(in_len: usize, out_len: usize) -> ResizeAxis {
    let mut lo = Vec::with_capacity(out_len);
    let mut hi = Vec::with_capacity(out_len);
    let mut w_hi = Vec::with_capacity(out_len);
    let scale = in_len as f64 / out_len as f64;
    for d in 0..out_len {
        let src = (d as f64 + 0.5) * scale - 0.5;
        let f = crate::fmath::floor(src);
        let frac = src - f;
        let i0 = f as isize;
        let clamp = |i: isize| i.clamp(0, in_len as isize - 1) as usize;
        lo.push(clamp(i0));
        hi.push(clamp(i0 + 1));
        w_hi.push(frac);
    }
    ResizeAxis { lo, hi, w_hi }
}

/// Bilinear resize of a C×H×W image using precomputed axis tables.
pub fn bilinear_forward(
    x: &[f64],
    c: usize,
    in_h: usize,
    in_w: usize,
    ys: &ResizeAxis,
    xs: &ResizeAxis,
    out: &mut [f64],
) {
    let out_h = ys.lo.len();
    let out_w = xs.lo.len();
    debug_assert_eq!(out.len(), c * out_h * out_w);
    for ch in 0..c {
        let src = &x[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, wy) = (ys.lo[oy], ys.hi[oy], ys.w_hi[oy]);
            let r0 = &src[y0 * in_w..(y0 + 1) * in_w];
            let r1 = &src[y1 * in_w..(y1 + 1) * in_w];
            let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
            for ox in 0..out_w {
                let (x0, x1, wx) = (xs.lo[ox], xs.hi[ox], xs.w_hi[ox]);
                let top = (1.0 - wx) * r0[x0] + wx * r0[x1];
                let bot = (1.0 - wx) * r1[x0] + wx * r1[x1];
                drow[ox] = (1.0 - wy) * top + wy * bot;
            }
        }
    }
}

/// Adjoint of `bilinear_forward`: scatter-add the output gradient.
pub fn bilinear_backward(
    d_out: &[f64],
    c: usize,
    in_h: usize,
    in_w: usize,
    ys: &ResizeAxis,
    xs: &ResizeAxis,
    dx: &mut [f64],
) {
    let out_h = ys.lo.len();
    let out_w = xs.lo.len();
    debug_assert_eq!(dx.len(), c * in_h * in_w);
    for ch in 0..c {
        let src = &d_out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        let dst = &mut dx[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        for oy in 0..out_h {
            let (y0, y1, wy) = (ys.lo[oy], ys.hi[oy], ys.w_hi[oy]);
            for ox in 0..out_w {
                let g = src[oy * out_w + ox];
                if g == 0.0 {
                    continue;
                }
                let (x0, x1, wx) = (xs.lo[ox], xs.hi[ox], xs.w_hi[ox]);
                dst[y0 * in_w + x0] += (1.0 - wy) * (1.0 - wx) * g;
                dst[y0 * in_w + x1] += (1.0 - wy) * wx * g;
                dst[y1 * in_w + x0] += wy * (1.0 - wx) * g;
                dst[y1 * in_w + x1] += wy * wx * g;
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + crate::fmath::exp(-x))
    } else {
        let e = crate::fmath::exp(x);
        e / (1.0 + e)
    }
}

/// Softmax along `axis` of a tensor with the given shape, max-subtracted.
/// Writes probabilities into `out` (may alias a fresh buffer, not `x`).
pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize, out: &mut [f64]) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut scratch = vec![0.0f64; axis_len];
    for o in 0..outer {
        let base = o * axis_len * inner;
        for i in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                let v = x[base + a * inner + i];
                if v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for (a, s) in scratch.iter_mut().enumerate() {
                let e = crate::fmath::exp(x[base + a * inner + i] - max);
                *s = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for (a, &s) in scratch.iter().enumerate() {
                out[base + a * inner + i] = s * inv;
            }
        }
    }
}
