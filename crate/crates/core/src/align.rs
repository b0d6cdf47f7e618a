//! Backward warping, occlusion masks and a pyramidal block-matching flow
//! estimator.
//!
//! Flow convention: `flow(p)` points from a pixel of the reference frame to
//! its match in the other frame, so `warp_bilinear(other, flow)` brings
//! `other` into the reference geometry.

use rayon::prelude::*;

use crate::color::LUMA_709;
use crate::error::{invalid, Result};
use crate::imageio::{FlowField, Image, RgbImage};

/// Binary per-pixel mask stored as a single-channel image of 0/1 values.
pub type ValidityMask = Image;

/// Default threshold on the in-bounds bilinear weight.
pub const VALIDITY_THRESH: f64 = 0.999;
/// Default forward/backward consistency tolerance in pixels.
pub const FB_THRESH: f64 = 1.0;

/// Bilinear taps of a sample position: `(y, x, weight)` for the four
/// neighbours, with out-of-bounds taps dropped. Returns the in-bounds weight.
#[inline]
fn taps(h: usize, w: usize, sy: f64, sx: f64, out: &mut [(usize, usize, f64); 4]) -> (usize, f64) {
    let (y0, x0) = (sy.floor(), sx.floor());
    let (fy, fx) = (sy - y0, sx - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let mut n = 0;
    let mut total = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let wgt = wy * wx;
            if wgt == 0.0 {
                continue;
            }
            let (y, x) = (y0 + dy, x0 + dx);
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                out[n] = (y as usize, x as usize, wgt);
                n += 1;
                total += wgt;
            }
        }
    }
    (n, total)
}

/// In-bounds bilinear weight of sampling at `p + flow(p)`, per pixel.
pub fn validity_weight(flow: &FlowField) -> Vec<f64> {
    let (h, w) = (flow.height, flow.width);
    let mut buf = [(0, 0, 0.0); 4];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(y, x);
            out.push(taps(h, w, y as f64 + v as f64, x as f64 + u as f64, &mut buf).1);
        }
    }
    out
}

/// Samples `img` at `p + flow(p)`. Out-of-bounds taps contribute zero; the
/// mask is 1 where the in-bounds weight reaches [`VALIDITY_THRESH`].
pub fn warp_bilinear(img: &Image, flow: &FlowField) -> Result<(Image, ValidityMask)> {
    if img.width != flow.width || img.height != flow.height {
        return Err(invalid!(
            "flow is {}x{} but image is {}x{}",
            flow.width,
            flow.height,
            img.width,
            img.height
        ));
    }
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut out = Image::zeros(w, h, c);
    let mut mask = Image::zeros(w, h, 1);
    let mut buf = [(0, 0, 0.0); 4];
    let mut acc = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(y, x);
            let (n, total) = taps(h, w, y as f64 + v as f64, x as f64 + u as f64, &mut buf);
            acc.iter_mut().for_each(|a| *a = 0.0);
            for &(ty, tx, wgt) in &buf[..n] {
                for (ch, a) in acc.iter_mut().enumerate() {
                    *a += wgt * img.get(ty, tx, ch) as f64;
                }
            }
            for (ch, a) in acc.iter().enumerate() {
                out.set(y, x, ch, *a as f32);
            }
            mask.set(y, x, 0, if total >= VALIDITY_THRESH { 1.0 } else { 0.0 });
        }
    }
    Ok((out, mask))
}

fn sample_flow(flow: &FlowField, sy: f64, sx: f64) -> (f64, f64, f64) {
    let mut buf = [(0, 0, 0.0); 4];
    let (n, total) = taps(flow.height, flow.width, sy, sx, &mut buf);
    let (mut u, mut v) = (0.0, 0.0);
    for &(y, x, wgt) in &buf[..n] {
        let (fu, fv) = flow.at(y, x);
        u += wgt * fu as f64;
        v += wgt * fv as f64;
    }
    (u, v, total)
}

/// Pixel is valid iff its warped sample keeps at least `validity_thresh` of
/// its bilinear weight in bounds and `|fwd(p) + bwd(p + fwd(p))| <= fb_thresh`.
pub fn occlusion_mask(fwd: &FlowField, bwd: &FlowField, fb_thresh: f64, validity_thresh: f64) -> Result<ValidityMask> {
    if fwd.width != bwd.width || fwd.height != bwd.height {
        return Err(invalid!("forward and backward flows differ in size"));
    }
    let (h, w) = (fwd.height, fwd.width);
    let mut mask = Image::zeros(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = fwd.at(y, x);
            let (bu, bv, total) = sample_flow(bwd, y as f64 + v as f64, x as f64 + u as f64);
            if total < validity_thresh {
                continue;
            }
            // renormalize the few-ppm weight lost at the border
            let (bu, bv) = (bu / total, bv / total);
            let err = (u as f64 + bu).hypot(v as f64 + bv);
            if err <= fb_thresh {
                mask.set(y, x, 0, 1.0);
            }
        }
    }
    Ok(mask)
}

/// Mask from the validity weight alone (no backward flow available).
pub fn validity_mask(flow: &FlowField, validity_thresh: f64) -> ValidityMask {
    let data = validity_weight(flow).into_iter().map(|t| if t >= validity_thresh { 1.0 } else { 0.0 }).collect();
    Image { width: flow.width, height: flow.height, channels: 1, data }
}

pub const BLOCK: usize = 8;

struct Gray {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Gray {
    fn from_rgb(img: &RgbImage) -> Self {
        let data = img
            .image
            .data
            .chunks(3)
            .map(|p| (LUMA_709[0] * p[0] as f64 + LUMA_709[1] * p[1] as f64 + LUMA_709[2] * p[2] as f64) as f32)
            .collect();
        Gray { w: img.width(), h: img.height(), data }
    }

    fn half(&self) -> Self {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * self.w + 2 * x;
                data.push(0.25 * (self.data[i] + self.data[i + 1] + self.data[i + self.w] + self.data[i + self.w + 1]));
            }
        }
        Gray { w, h, data }
    }

    /// SAD of the block at `(by, bx)` against `other` displaced by `(dy, dx)`,
    /// `None` when the displaced block leaves the image.
    fn sad(&self, other: &Gray, by: usize, bx: usize, dy: isize, dx: isize) -> Option<f64> {
        let (ty, tx) = (by as isize + dy, bx as isize + dx);
        if ty < 0 || tx < 0 || ty as usize + BLOCK > other.h || tx as usize + BLOCK > other.w {
            return None;
        }
        let (ty, tx) = (ty as usize, tx as usize);
        let mut s = 0.0f64;
        for r in 0..BLOCK {
            let a = &self.data[(by + r) * self.w + bx..][..BLOCK];
            let b = &other.data[(ty + r) * other.w + tx..][..BLOCK];
            s += a.iter().zip(b).map(|(p, q)| (p - q).abs() as f64).sum::<f64>();
        }
        Some(s)
    }
}

fn block_starts(n: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n / BLOCK).map(|i| i * BLOCK).collect();
    if n % BLOCK != 0 {
        v.push(n - BLOCK);
    }
    v
}

/// Parabolic sub-pixel offset from three costs, snapped to half a pixel.
fn half_pel(cm: f64, c0: f64, cp: f64) -> f64 {
    let denom = cm - 2.0 * c0 + cp;
    if c0 == 0.0 || denom <= 0.0 {
        return 0.0;
    }
    let off = ((cm - cp) / (2.0 * denom)).clamp(-0.5, 0.5);
    (off * 2.0).round() / 2.0
}

/// Coarse-to-fine block matching of `src` against `dst` on luma. `levels`
/// counts pyramid levels including full resolution.
pub fn flow_block_match(src: &RgbImage, dst: &RgbImage, levels: usize, radius: usize) -> Result<FlowField> {
    if src.width() != dst.width() || src.height() != dst.height() {
        return Err(invalid!("flow needs equal-size images"));
    }
    if src.width() < BLOCK || src.height() < BLOCK {
        return Err(invalid!("images smaller than one {}x{} block", BLOCK, BLOCK));
    }
    let mut pyr = vec![(Gray::from_rgb(src), Gray::from_rgb(dst))];
    while pyr.len() < levels.max(1) {
        let (a, b) = pyr.last().unwrap();
        if a.w / 2 < BLOCK || a.h / 2 < BLOCK {
            break;
        }
        let next = (a.half(), b.half());
        pyr.push(next);
    }
    let r = radius as isize;
    // per-level block flow on the block grid of that level
    let mut prev: Option<(Vec<usize>, Vec<usize>, Vec<(f64, f64)>, usize)> = None;
    let mut result = FlowField::zeros(src.width(), src.height());
    for (lvl, (a, b)) in pyr.iter().enumerate().rev() {
        let (ys, xs) = (block_starts(a.h), block_starts(a.w));
        let predict = |by: usize, bx: usize| -> (isize, isize) {
            match &prev {
                None => (0, 0),
                Some((pys, pxs, flows, pw)) => {
                    let (cy, cx) = ((by + BLOCK / 2) / 2, (bx + BLOCK / 2) / 2);
                    let iy = pys.iter().rposition(|&s| s <= cy).unwrap_or(0);
                    let ix = pxs.iter().rposition(|&s| s <= cx).unwrap_or(0);
                    let (u, v) = flows[iy * pw + ix];
                    ((2.0 * v).round() as isize, (2.0 * u).round() as isize)
                }
            }
        };
        let coords: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
        let finest = lvl == 0;
        let flows: Vec<(f64, f64)> = coords
            .par_iter()
            .map(|&(by, bx)| {
                let (py, px) = predict(by, bx);
                let mut best = (py, px);
                let mut best_cost = a.sad(b, by, bx, py, px);
                for dy in -r..=r {
                    for dx in -r..=r {
                        if let Some(c) = a.sad(b, by, bx, py + dy, px + dx) {
                            if best_cost.is_none_or(|bc| c < bc) {
                                best_cost = Some(c);
                                best = (py + dy, px + dx);
                            }
                        }
                    }
                }
                let (mut u, mut v) = (best.1 as f64, best.0 as f64);
                if finest {
                    if let Some(c0) = best_cost {
                        let cost = |dy, dx| a.sad(b, by, bx, best.0 + dy, best.1 + dx);
                        if let (Some(l), Some(rt)) = (cost(0, -1), cost(0, 1)) {
                            u += half_pel(l, c0, rt);
                        }
                        if let (Some(up), Some(dn)) = (cost(-1, 0), cost(1, 0)) {
                            v += half_pel(up, c0, dn);
                        }
                    }
                }
                (u, v)
            })
            .collect();
        if finest {
            for (&(by, bx), &(u, v)) in coords.iter().zip(&flows) {
                for y in by..by + BLOCK {
                    for x in bx..bx + BLOCK {
                        let i = y * result.width + x;
                        result.u[i] = u as f32;
                        result.v[i] = v as f32;
                    }
                }
            }
        }
        let w = xs.len();
        prev = Some((ys, xs, flows, w));
    }
    Ok(result)
}

/// Horizontal mirror of a flow field (x components change sign).
pub fn hflip_flow(flow: &FlowField) -> FlowField {
    let (w, h) = (flow.width, flow.height);
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (s, d) = (y * w + x, y * w + (w - 1 - x));
            out.u[d] = -flow.u[s];
            out.v[d] = flow.v[s];
        }
    }
    out
}

/// Vertical mirror of a flow field (y components change sign).
pub fn vflip_flow(flow: &FlowField) -> FlowField {
    let (w, h) = (flow.width, flow.height);
    let mut out = FlowField::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (s, d) = (y * w + x, (h - 1 - y) * w + x);
            out.u[d] = flow.u[s];
            out.v[d] = -flow.v[s];
        }
    }
    out
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, img.width - 1 - x, c, img.get(y, x, c));
            }
        }
    }
    out
}

pub fn vflip(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(img.height - 1 - y, x, c, img.get(y, x, c));
            }
        }
    }
    out
}
