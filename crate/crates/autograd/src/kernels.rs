//! Plain forward/backward kernels used by the graph ops.

use rayon::prelude::*;

use crate::real::{gemm, Real};
use crate::tensor::{broadcast_strides, for_each_broadcast, strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = iy as usize * g.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * hw;
    let k = g.col_rows();
    let mut out = vec![T::zero(); g.n * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(n, dst)| {
        let xn = &x[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.o, k, hw, w, false, xn, false, dst, false);
        } else {
            let mut col = vec![T::zero(); k * hw];
            im2col(xn, g, &mut col);
            gemm(g.o, k, hw, w, false, &col, false, dst, false);
        }
        if let Some(b) = b {
            for (o, row) in dst.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    out
}

/// Returns `(dx, dw, db)`; per-sample weight gradients are reduced in sample order.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let hw = ho * wo;
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * hw;
    let k = g.col_rows();
    let parts: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let gn = &dout[n * out_len..(n + 1) * out_len];
            let mut dx = Vec::new();
            let mut dw = Vec::new();
            if g.is_pointwise() {
                if need_dx {
                    dx = vec![T::zero(); in_len];
                    gemm(k, g.o, hw, w, true, gn, false, &mut dx, false);
                }
                if need_dw {
                    dw = vec![T::zero(); g.o * k];
                    gemm(g.o, hw, k, gn, false, xn, true, &mut dw, false);
                }
            } else {
                let mut col = vec![T::zero(); k * hw];
                if need_dw {
                    im2col(xn, g, &mut col);
                    dw = vec![T::zero(); g.o * k];
                    gemm(g.o, hw, k, gn, false, &col, true, &mut dw, false);
                }
                if need_dx {
                    gemm(k, g.o, hw, w, true, gn, false, &mut col, false);
                    dx = vec![T::zero(); in_len];
                    col2im(&col, g, &mut dx);
                }
            }
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::new();
    let mut dw = if need_dw { vec![T::zero(); g.o * k] } else { Vec::new() };
    if need_dx {
        dx.reserve(g.n * in_len);
    }
    for (pdx, pdw) in parts {
        if need_dx {
            dx.extend_from_slice(&pdx);
        }
        if need_dw {
            for (a, b) in dw.iter_mut().zip(&pdw) {
                *a += *b;
            }
        }
    }
    let mut db = vec![T::zero(); g.o];
    for n in 0..g.n {
        for (o, row) in dout[n * out_len..(n + 1) * out_len].chunks(hw).enumerate() {
            db[o] += row.iter().copied().sum::<T>();
        }
    }
    (dx, dw, db)
}

/// Output columns `ox` whose input column `ox + j - pad` is inside `[0, w)`.
fn tap_cols(j: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = (w + pad).saturating_sub(j).min(wo);
    (lo, hi.max(lo))
}

/// Depthwise 2-D convolution, stride 1, zero padding `pad`.
pub fn dwconv_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.n * g.c * ho * wo];
    out.par_chunks_mut(g.c * ho * wo).enumerate().for_each(|(n, dst)| {
        for c in 0..g.c {
            let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
            let kern = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let o = &mut dst[c * ho * wo..(c + 1) * ho * wo];
            if let Some(b) = b {
                o.iter_mut().for_each(|v| *v = b[c]);
            }
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let k = kern[i * g.kw + j];
                    let (lo, hi) = tap_cols(j, g.pad, g.w, wo);
                    for oy in 0..ho {
                        let iy = (oy + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize || lo == hi {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w + lo + j - g.pad..][..hi - lo];
                        let row = &mut o[oy * wo + lo..oy * wo + hi];
                        for (r, s) in row.iter_mut().zip(src) {
                            *r += k * *s;
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn dwconv_backward<T: Real>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.c];
    for n in 0..g.n {
        for c in 0..g.c {
            let pidx = (n * g.c + c) * g.h * g.w;
            let kern = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let go = &dout[(n * g.c + c) * ho * wo..(n * g.c + c + 1) * ho * wo];
            db[c] += go.iter().copied().sum::<T>();
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let k = kern[i * g.kw + j];
                    let (lo, hi) = tap_cols(j, g.pad, g.w, wo);
                    let mut acc = T::zero();
                    for oy in 0..ho {
                        let iy = (oy + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize || lo == hi {
                            continue;
                        }
                        let start = pidx + iy as usize * g.w + lo + j - g.pad;
                        let grow = &go[oy * wo + lo..oy * wo + hi];
                        let xrow = &x[start..start + hi - lo];
                        for (gv, xv) in grow.iter().zip(xrow) {
                            acc += *gv * *xv;
                        }
                        for (d, gv) in dx[start..start + hi - lo].iter_mut().zip(grow) {
                            *d += *gv * k;
                        }
                    }
                    dw[c * g.kh * g.kw + i * g.kw + j] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn permute<T: Real>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_strides = strides_of(t.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; perm.len()];
    let mut out = vec![T::zero(); t.numel()];
    let src = t.data();
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, a, _| out[o] = src[a]);
    Tensor::new(&out_shape, out).expect("permute preserves size")
}

/// Broadcasts `g` (shape compatible with `to`) up to `to`.
pub fn expand<T: Real>(g: &Tensor<T>, to: &[usize]) -> Tensor<T> {
    if g.shape() == to {
        return g.clone();
    }
    let sg = broadcast_strides(g.shape(), to);
    let zeros = vec![0; to.len()];
    let mut out = vec![T::zero(); to.iter().product()];
    let src = g.data();
    for_each_broadcast(to, &sg, &zeros, |o, a, _| out[o] = src[a]);
    Tensor::new(to, out).expect("expand target shape")
}

/// Splits `shape` around `axis` into (outer, axis, inner) extents.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
