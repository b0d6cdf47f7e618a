//! Synthetic multi-device dataset construction, patch extraction and batch
//! sampling.
//!
//! Each scene is a procedural (or user-supplied) sRGB image. Device 0 plays
//! the source camera: its RAW is produced by the inverse reference ISP. Every
//! device's ground truth is the forward reference ISP of the clean RAW under
//! that device's white balance and style, displaced by a smooth random flow
//! whose inverse is recorded next to it.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use metaisp_autograd::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{self, occlusion_mask, validity_mask, warp_bilinear, FB_THRESH, VALIDITY_THRESH};
use crate::color::{linear_to_srgb, COLOR_CHECKER_LINEAR};
use crate::error::{invalid, Error, Result};
use crate::imageio::{
    self, pack_rggb, read_flow, read_raw, read_rgb, write_flow, write_manifest, write_raw, write_rgb, ColorSpace, FlowField,
    Image, Manifest, ManifestRecord, RawImage, RawMeta, RgbImage, Split,
};
use crate::nnisp::{iso_exp_features, resize_bilinear, Batch};
use crate::refisp::{self, forward_isp, inverse_isp_scaled, DevicePreset, NoiseParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Directory of binary PPM images; procedural scenes when absent.
    pub source_dir: Option<PathBuf>,
    pub num_scenes: usize,
    /// Side of the square mosaic (and of every ground truth), even.
    pub scene_size: usize,
    pub num_devices: usize,
    /// Largest displacement of the per-device misalignment, in pixels.
    pub misalignment_px: f64,
    /// Gaussian blur of the misalignment noise, as a fraction of the size.
    pub flow_smoothness: f64,
    pub noise: NoiseParams,
    pub black_level: u16,
    pub white_level: u16,
    pub style_seed: u64,
    pub scene_seed: u64,
    pub splits: SplitFractions,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            source_dir: None,
            num_scenes: 60,
            scene_size: 128,
            num_devices: 3,
            misalignment_px: 3.0,
            flow_smoothness: 0.15,
            noise: NoiseParams { shot_gain: 2e-4, read_sigma: 1e-3 },
            black_level: 64,
            white_level: 16383,
            style_seed: 0,
            scene_seed: 0,
            splits: SplitFractions::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.splits;
        if [s.train, s.val, s.test].iter().any(|v| *v < 0.0) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(invalid!("split fractions must be non-negative and sum to 1: {:?}", s));
        }
        if self.num_devices < 2 {
            return Err(invalid!("need at least 2 devices, got {}", self.num_devices));
        }
        if self.num_scenes == 0 {
            return Err(invalid!("need at least one scene"));
        }
        if self.scene_size < 16 || self.scene_size % 2 != 0 {
            return Err(invalid!("scene size must be even and at least 16, got {}", self.scene_size));
        }
        if !(self.misalignment_px >= 0.0 && self.misalignment_px.is_finite()) {
            return Err(invalid!("misalignment must be a non-negative number of pixels"));
        }
        if self.black_level >= self.white_level {
            return Err(invalid!("black level must be below white level"));
        }
        Ok(())
    }

    /// Border rendered around each scene so misaligned targets have no holes.
    fn margin(&self) -> usize {
        let m = self.misalignment_px.ceil() as usize + 3;
        m + m % 2
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer of the pair
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth value noise in `[0, 1]` on a lattice of the given cell size.
fn value_noise(w: usize, h: usize, cell: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 / cell, x as f64 / cell);
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Procedural sRGB scene: colored gradient, multi-octave texture, a
/// color-checker block and a few flat shapes.
pub fn procedural_scene(size: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let corners: Vec<[f64; 3]> = (0..4).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let mut px = vec![[0.0f64; 3]; n];
    for y in 0..size {
        for x in 0..size {
            let (ty, tx) = (y as f64 / (size - 1) as f64, x as f64 / (size - 1) as f64);
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - tx) + corners[1][c] * tx;
                let bot = corners[2][c] * (1.0 - tx) + corners[3][c] * tx;
                px[y * size + x][c] = 0.2 + 0.6 * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    let mut tex = vec![0.0; n];
    for (octave, cell) in [size as f64 / 4.0, size as f64 / 10.0, size as f64 / 24.0].into_iter().enumerate() {
        let amp = 0.5f64.powi(octave as i32);
        for (t, v) in tex.iter_mut().zip(value_noise(size, size, cell.max(2.0), &mut rng)) {
            *t += amp * (v - 0.5);
        }
    }
    let tint: [f64; 3] = [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)];
    for (p, t) in px.iter_mut().zip(&tex) {
        for c in 0..3 {
            p[c] += 0.25 * t * tint[c];
        }
    }
    // color checker block: 6 x 4 patches
    let patch = rng.random_range(size / 20..=size / 10).max(2);
    let (cy, cx) = (rng.random_range(0..=size - 4 * patch), rng.random_range(0..=size - 6 * patch));
    for (i, lin) in COLOR_CHECKER_LINEAR.iter().enumerate() {
        let (py, pxx) = (cy + (i / 6) * patch, cx + (i % 6) * patch);
        for y in py..py + patch {
            for x in pxx..pxx + patch {
                px[y * size + x] = [linear_to_srgb(lin[0]), linear_to_srgb(lin[1]), linear_to_srgb(lin[2])];
            }
        }
    }
    for _ in 0..rng.random_range(3..7) {
        let color = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
        let (oy, ox) = (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64));
        let r = rng.random_range(size as f64 / 16.0..size as f64 / 5.0);
        let disc = rng.random::<bool>();
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 - oy, x as f64 - ox);
                let inside = if disc { dy.hypot(dx) < r } else { dy.abs() < r && dx.abs() < 0.6 * r };
                if inside {
                    px[y * size + x] = color;
                }
            }
        }
    }
    let data = px.iter().flat_map(|p| p.iter().map(|&v| v.clamp(0.04, 0.96) as f32)).collect();
    RgbImage::srgb(size, size, data).expect("scene shape")
}

/// [`procedural_scene`] low-passed per channel with a gaussian of `sigma`
/// pixels, squeezed into `[0.05, 0.95]`.
pub fn smooth_scene(size: usize, seed: u64, sigma: f64) -> RgbImage {
    let scene = procedural_scene(size, seed);
    let mut data = vec![0.0f32; size * size * 3];
    for c in 0..3 {
        let plane: Vec<f64> = scene.image.data.iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        for (i, v) in gaussian_blur(&plane, size, size, sigma).into_iter().enumerate() {
            data[i * 3 + c] = (0.05 + 0.9 * v) as f32;
        }
    }
    RgbImage::srgb(size, size, data).expect("scene shape")
}

fn gaussian_blur(field: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let o = i as isize - r;
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += kv * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / ks;
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Smooth random displacement whose largest magnitude is `max_px`.
pub fn smooth_flow(w: usize, h: usize, max_px: f64, smoothness: f64, seed: u64) -> FlowField {
    if max_px == 0.0 {
        return FlowField::zeros(w, h);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (smoothness * w.max(h) as f64).max(1.0);
    let mut comp = || -> Vec<f64> {
        let noise: Vec<f64> = (0..w * h).map(|_| StandardNormal.sample(&mut rng)).collect();
        gaussian_blur(&noise, w, h, sigma)
    };
    let (u, v) = (comp(), comp());
    let peak = u.iter().zip(&v).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max).max(1e-12);
    let s = max_px / peak;
    FlowField { width: w, height: h, u: u.iter().map(|a| (a * s) as f32).collect(), v: v.iter().map(|b| (b * s) as f32).collect() }
}

/// Solves `F(p) = -G(p + F(p))` by fixed-point iteration: the flow that
/// undoes a backward warp by `G`.
pub fn invert_flow(g: &FlowField, iterations: usize) -> FlowField {
    let (w, h) = (g.width, g.height);
    let mut f = FlowField::zeros(w, h);
    let img = Image {
        width: w,
        height: h,
        channels: 2,
        data: g.u.iter().zip(&g.v).flat_map(|(a, b)| [*a, *b]).collect(),
    };
    for _ in 0..iterations {
        let (sampled, _) = warp_bilinear_clamped(&img, &f);
        for i in 0..w * h {
            f.u[i] = -sampled.data[2 * i];
            f.v[i] = -sampled.data[2 * i + 1];
        }
    }
    f
}

/// Bilinear sampling with edge clamping (no holes), for smooth fields.
fn warp_bilinear_clamped(img: &Image, flow: &FlowField) -> (Image, ()) {
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut out = Image::zeros(w, h, c);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(y, x);
            let sy = (y as f64 + v as f64).clamp(0.0, (h - 1) as f64);
            let sx = (x as f64 + u as f64).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let a = img.get(y0, x0, ch) as f64 * (1.0 - fx) + img.get(y0, x1, ch) as f64 * fx;
                let b = img.get(y1, x0, ch) as f64 * (1.0 - fx) + img.get(y1, x1, ch) as f64 * fx;
                out.set(y, x, ch, (a * (1.0 - fy) + b * fy) as f32);
            }
        }
    }
    (out, ())
}

/// Everything synthesized for one scene.
#[derive(Clone, Debug)]
pub struct SceneRender {
    pub raw: RawImage,
    /// Per-device targets in their own (misaligned) geometry.
    pub gt: Vec<RgbImage>,
    /// Per-device targets before misalignment, for verification.
    pub gt_aligned: Vec<RgbImage>,
    /// Flow bringing each target into the source geometry.
    pub flows: Vec<FlowField>,
    pub wb_dg: Vec<[f64; 4]>,
}

fn load_source(cfg: &SynthConfig, index: usize, canvas: usize) -> Result<RgbImage> {
    let Some(dir) = &cfg.source_dir else {
        return Ok(procedural_scene(canvas, mix_seed(cfg.scene_seed, index as u64)));
    };
    let files = source_files(dir)?;
    let img = read_rgb(&files[index % files.len()])?;
    let side = img.height().min(img.width());
    let (y0, x0) = ((img.height() - side) / 2, (img.width() - side) / 2);
    let cropped = img.image.crop(y0, x0, side, side)?;
    let t = Tensor::new(&[1, 3, side, side], cropped.to_planar())?;
    let r = resize_bilinear(&t, canvas, canvas)?;
    let data: Vec<f32> = r.data().iter().map(|v| v.clamp(0.04, 0.96)).collect();
    let image = Image::from_planar(canvas, canvas, 3, &data)?;
    RgbImage::new(image, ColorSpace::Srgb)
}

fn source_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid!("source directory {} has no .ppm images", dir.display()));
    }
    Ok(files)
}

fn crop_raw(raw: &RawImage, m: usize, size: usize) -> Result<RawImage> {
    let mut mosaic = Vec::with_capacity(size * size);
    for y in m..m + size {
        mosaic.extend_from_slice(&raw.mosaic[y * raw.width + m..y * raw.width + m + size]);
    }
    RawImage::new(size, size, mosaic, raw.meta.clone())
}

/// Renders scene `index` for all presets.
pub fn render_scene(cfg: &SynthConfig, presets: &[DevicePreset], index: usize) -> Result<SceneRender> {
    let m = cfg.margin();
    let (size, canvas) = (cfg.scene_size, cfg.scene_size + 2 * m);
    let src = load_source(cfg, index, canvas)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.scene_seed ^ 0x5EED, index as u64));
    let scene_wb = [rng.random_range(1.4..2.6), 1.0, 1.0, rng.random_range(1.2..2.3)];
    let iso = [100.0, 200.0, 400.0, 800.0][rng.random_range(0..4)];
    let exposure_scale: f64 = rng.random_range(0.35..1.0);
    // exposure product iso * t = 4 renders at scale 1
    let exposure_s = 4.0 * exposure_scale / iso;
    let src_wb = presets[0].device_wb(&scene_wb);
    let meta = RawMeta {
        black_level: cfg.black_level,
        white_level: cfg.white_level,
        wb_gains: src_wb,
        iso,
        exposure_s,
        device_id: Some(presets[0].device_id),
    };
    let noise = NoiseParams { shot_gain: cfg.noise.shot_gain * iso / 100.0, read_sigma: cfg.noise.read_sigma * iso / 100.0 };
    let style0 = &presets[0].style;
    let raw_canvas = inverse_isp_scaled(&src, style0, &meta, noise, mix_seed(cfg.scene_seed ^ 0x0015E, index as u64), exposure_scale)?;
    let clean = inverse_isp_scaled(&src, style0, &meta, NoiseParams::off(), 0, 1.0)?;
    let raw = crop_raw(&raw_canvas, m, size)?;
    let (mut gt, mut gt_aligned, mut flows, mut wb_dg) = (vec![], vec![], vec![], vec![]);
    for (d, preset) in presets.iter().enumerate() {
        let wb = preset.device_wb(&scene_wb);
        let mut dev_raw = clean.clone();
        dev_raw.meta.wb_gains = wb;
        dev_raw.meta.device_id = Some(preset.device_id);
        let full = forward_isp(&dev_raw, &preset.style)?;
        let gflow = if d == 0 {
            FlowField::zeros(canvas, canvas)
        } else {
            smooth_flow(canvas, canvas, cfg.misalignment_px, cfg.flow_smoothness, mix_seed(cfg.scene_seed ^ 0xF10, (index * 131 + d) as u64))
        };
        let (moved, _) = warp_bilinear_clamped(&full.image, &gflow);
        let recorded = invert_flow(&gflow, 30).crop(m, m, size, size)?;
        gt.push(RgbImage::new(moved.crop(m, m, size, size)?, ColorSpace::Srgb)?);
        gt_aligned.push(RgbImage::new(full.image.crop(m, m, size, size)?, ColorSpace::Srgb)?);
        flows.push(recorded);
        wb_dg.push(wb);
    }
    Ok(SceneRender { raw, gt, gt_aligned, flows, wb_dg })
}

/// Split of each scene index, from a seeded shuffle.
pub fn assign_splits(n: usize, fractions: SplitFractions, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5B17));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (fractions.train * n as f64).round() as usize;
    let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train.min(n));
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PRESETS_FILE: &str = "presets.json";
pub const SYNTH_CONFIG_FILE: &str = "synth_config.json";

pub fn scene_id(index: usize) -> String {
    format!("scene{index:04}")
}

/// Writes the dataset under `out_dir` and returns its manifest.
pub fn build_synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if let Some(dir) = &cfg.source_dir {
        source_files(dir)?;
    }
    let presets = refisp::make_device_styles(cfg.num_devices, cfg.style_seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_json(&out_dir.join(PRESETS_FILE), &presets)?;
    write_json(&out_dir.join(SYNTH_CONFIG_FILE), cfg)?;
    let splits = assign_splits(cfg.num_scenes, cfg.splits, cfg.scene_seed);
    let records: Vec<Vec<ManifestRecord>> = (0..cfg.num_scenes)
        .into_par_iter()
        .map(|i| -> Result<Vec<ManifestRecord>> {
            let scene = render_scene(cfg, &presets, i)?;
            let id = scene_id(i);
            let dir = out_dir.join("scenes").join(&id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let raw_rel = format!("scenes/{id}/raw.pgm");
            write_raw(&scene.raw, &out_dir.join(&raw_rel))?;
            let mut recs = Vec::with_capacity(presets.len());
            for (d, p) in presets.iter().enumerate() {
                let rgb_rel = format!("scenes/{id}/gt_d{}.ppm", p.device_id);
                let flow_rel = format!("scenes/{id}/flow_d{}.flo", p.device_id);
                write_rgb(&scene.gt[d], &out_dir.join(&rgb_rel))?;
                write_flow(&scene.flows[d], &out_dir.join(&flow_rel))?;
                recs.push(ManifestRecord {
                    scene_id: id.clone(),
                    device_id: p.device_id,
                    raw_path: raw_rel.clone(),
                    rgb_path: rgb_rel,
                    flow_path: Some(flow_rel),
                    split: splits[i],
                    wb_dg: Some(scene.wb_dg[d]),
                });
            }
            Ok(recs)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest { root: out_dir.to_path_buf(), records: records.into_iter().flatten().collect() };
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub(crate) fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_presets(path: &Path) -> Result<Vec<DevicePreset>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let presets: Vec<DevicePreset> = serde_json::from_str(&text)?;
    for p in &presets {
        p.style.validate()?;
    }
    Ok(presets)
}

// ---------------------------------------------------------------------------
// patches

/// A tile and its top-left corner in the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub y: usize,
    pub x: usize,
    pub image: Image,
}

/// Corners of the non-overlapping row-major tiles of a centered `crop`
/// (rounded to even offsets so CFA phase is kept).
pub fn patch_grid(height: usize, width: usize, patch: usize, crop: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let (ch, cw) = crop;
    if patch == 0 || ch > height || cw > width {
        return Err(invalid!("crop {}x{} does not fit a {}x{} image", cw, ch, width, height));
    }
    if ch % patch != 0 || cw % patch != 0 {
        return Err(invalid!("crop {}x{} is not divisible into {} px patches", cw, ch, patch));
    }
    let (oy, ox) = (((height - ch) / 2) & !1, ((width - cw) / 2) & !1);
    Ok((0..ch / patch).flat_map(|i| (0..cw / patch).map(move |j| (oy + i * patch, ox + j * patch))).collect())
}

pub fn extract_patches(image: &Image, patch: usize, crop: (usize, usize)) -> Result<Vec<Patch>> {
    patch_grid(image.height, image.width, patch, crop)?
        .into_iter()
        .map(|(y, x)| Ok(Patch { y, x, image: image.crop(y, x, patch, patch)? }))
        .collect()
}

// ---------------------------------------------------------------------------
// loading and sampling

/// How training targets are aligned to the source geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    /// Flows recorded at synthesis time, validity-weight masks.
    Recorded,
    /// Flows re-estimated by block matching, forward/backward masks.
    Estimated,
}

/// One device's target for a scene, warped into the source geometry.
#[derive(Clone, Debug)]
pub struct Target {
    pub device_id: u32,
    pub gt: Image,
    pub mask: Image,
    pub flow: FlowField,
    pub wb_dg: [f64; 4],
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub id: String,
    pub raw: RawImage,
    pub packed: Image,
    /// Packed full frame resized for the global-semantics branch, `[4, S, S]`.
    pub full: Option<Arc<Tensor<f32>>>,
    pub targets: Vec<Target>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    /// Patch side in output (mosaic) pixels.
    pub patch_size: usize,
    pub flow_mode: FlowMode,
    /// Global-semantics input side, `None` when the branch is off.
    pub full_size: Option<usize>,
}

/// Reference rendering of the source RAW in a device's style, used as the
/// anchor for flow estimation.
fn anchor_render(raw: &RawImage, preset: &DevicePreset) -> Result<RgbImage> {
    let mut r = raw.clone();
    let gain = 4.0 / (r.meta.iso * r.meta.exposure_s);
    let (bl, wl) = (r.meta.black_level as f64, r.meta.white_level as f64);
    for v in r.mosaic.iter_mut() {
        *v = (bl + (*v as f64 - bl) * gain).round().clamp(bl, wl) as u16;
    }
    forward_isp(&r, &preset.style)
}

pub fn load_scene(manifest: &Manifest, id: &str, load: &LoadConfig, presets: Option<&[DevicePreset]>) -> Result<Scene> {
    let recs = manifest.records_for(id);
    let first = recs.first().ok_or_else(|| invalid!("scene {id} has no records"))?;
    let raw = read_raw(&manifest.resolve(&first.raw_path))?;
    let packed = pack_rggb(&raw)?;
    let full = match load.full_size {
        Some(s) => {
            let t = Tensor::new(&[1, 4, packed.height, packed.width], packed.to_planar())?;
            Some(Arc::new(resize_bilinear(&t, s, s)?.reshape(&[4, s, s])?))
        }
        None => None,
    };
    let mut targets = Vec::with_capacity(recs.len());
    for r in recs {
        let gt = read_rgb(&manifest.resolve(&r.rgb_path))?;
        if gt.width() != raw.width || gt.height() != raw.height {
            return Err(invalid!("ground truth {} does not match its RAW size", r.rgb_path));
        }
        let (flow, mask) = match load.flow_mode {
            FlowMode::Recorded => {
                let flow = match &r.flow_path {
                    Some(p) => read_flow(&manifest.resolve(p))?,
                    None => FlowField::zeros(raw.width, raw.height),
                };
                let mask = validity_mask(&flow, VALIDITY_THRESH);
                (flow, mask)
            }
            FlowMode::Estimated => {
                let presets = presets.ok_or_else(|| invalid!("estimated flows need the preset file"))?;
                let preset = presets
                    .iter()
                    .find(|p| p.device_id == r.device_id)
                    .ok_or_else(|| invalid!("no preset for device {}", r.device_id))?;
                let anchor = anchor_render(&raw, preset)?;
                let fwd = align::flow_block_match(&anchor, &gt, 3, 2)?;
                let bwd = align::flow_block_match(&gt, &anchor, 3, 2)?;
                let mask = occlusion_mask(&fwd, &bwd, FB_THRESH, VALIDITY_THRESH)?;
                (fwd, mask)
            }
        };
        let (warped, _) = warp_bilinear(&gt.image, &flow)?;
        let wb_dg = r.wb_dg.unwrap_or(raw.meta.wb_gains);
        targets.push(Target { device_id: r.device_id, gt: warped, mask, flow, wb_dg });
    }
    targets.sort_by_key(|t| t.device_id);
    Ok(Scene { id: id.to_string(), raw, packed, full, targets })
}

/// Loaded split plus the patch grid every scene is cut into.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub patch_size: usize,
    /// Patch corners in mosaic coordinates.
    pub grid: Vec<(usize, usize)>,
    pub num_devices: usize,
}

impl Dataset {
    pub fn load(manifest: &Manifest, split: Split, load: &LoadConfig) -> Result<Self> {
        let ids = manifest.scenes(split);
        if ids.is_empty() {
            return Err(invalid!("manifest has no {:?} scenes", split));
        }
        let presets_path = manifest.root.join(PRESETS_FILE);
        let presets = if load.flow_mode == FlowMode::Estimated { Some(read_presets(&presets_path)?) } else { None };
        let scenes: Vec<Scene> = ids
            .par_iter()
            .map(|id| load_scene(manifest, id, load, presets.as_deref()))
            .collect::<Result<_>>()?;
        let (h, w) = (scenes[0].raw.height, scenes[0].raw.width);
        if scenes.iter().any(|s| s.raw.height != h || s.raw.width != w) {
            return Err(invalid!("all scenes must share one size"));
        }
        if load.patch_size % 2 != 0 {
            return Err(invalid!("patch size must be even"));
        }
        let crop = (h - h % load.patch_size, w - w % load.patch_size);
        let grid = patch_grid(h, w, load.patch_size, crop)?;
        let num_devices = scenes[0].targets.len();
        if scenes.iter().any(|s| s.targets.len() != num_devices) {
            return Err(invalid!("every scene needs one record per device"));
        }
        Ok(Self { scenes, patch_size: load.patch_size, grid, num_devices })
    }

    pub fn num_patches(&self) -> usize {
        self.scenes.len() * self.grid.len()
    }

    /// Sample for scene `s`, tile `t`, target device index `d`, no flips.
    pub fn sample(&self, s: usize, t: usize, d: usize) -> Result<Sample> {
        let scene = &self.scenes[s];
        let (y, x) = self.grid[t];
        let ps = self.patch_size;
        let target = &scene.targets[d];
        let meta = &scene.raw.meta;
        Ok(Sample {
            scene: s,
            device: d,
            x4: scene.packed.crop(y / 2, x / 2, ps / 2, ps / 2)?,
            x_full: scene.full.as_ref().map(|t| t.as_ref().clone()),
            coords: (y / 2, x / 2),
            packed_size: (scene.packed.height, scene.packed.width),
            wb: meta.wb_gains,
            iso: meta.iso,
            exposure_s: meta.exposure_s,
            gt: target.gt.crop(y, x, ps, ps)?,
            mask: target.mask.crop(y, x, ps, ps)?,
            flow: target.flow.crop(y, x, ps, ps)?,
            wb_dg: target.wb_dg,
        })
    }
}

/// One training example for a single target device.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scene: usize,
    pub device: usize,
    pub x4: Image,
    pub x_full: Option<Tensor<f32>>,
    /// Patch corner in packed full-frame coordinates.
    pub coords: (usize, usize),
    pub packed_size: (usize, usize),
    pub wb: [f64; 4],
    pub iso: f64,
    pub exposure_s: f64,
    pub gt: Image,
    pub mask: Image,
    pub flow: FlowField,
    pub wb_dg: [f64; 4],
}

fn flip_planes(t: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (ty, tx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
                out[(ch * h + ty) * w + tx] = d[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::new(s, out).expect("same shape")
}

impl Sample {
    /// Mirrors every spatial field. RAW tiles stay intact (CFA phase kept).
    pub fn flipped(&self, horizontal: bool) -> Sample {
        let (img, flow): (fn(&Image) -> Image, fn(&FlowField) -> FlowField) =
            if horizontal { (align::hflip, align::hflip_flow) } else { (align::vflip, align::vflip_flow) };
        let (ph, pw) = (self.x4.height, self.x4.width);
        let coords = if horizontal {
            (self.coords.0, self.packed_size.1 - self.coords.1 - pw)
        } else {
            (self.packed_size.0 - self.coords.0 - ph, self.coords.1)
        };
        Sample {
            x4: img(&self.x4),
            x_full: self.x_full.as_ref().map(|t| flip_planes(t, horizontal)),
            coords,
            gt: img(&self.gt),
            mask: img(&self.mask),
            flow: flow(&self.flow),
            ..self.clone()
        }
    }
}

/// Uniform device index in `0..k`.
pub fn draw_device(rng: &mut ChaCha8Rng, k: usize) -> usize {
    rng.random_range(0..k)
}

/// Draws `batch_size` independent samples from the dataset: uniform tile,
/// uniform device, independent horizontal and vertical flips.
pub fn sample_batch(data: &Dataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let idx = rng.random_range(0..data.num_patches());
        let (s, t) = (idx / data.grid.len(), idx % data.grid.len());
        let d = draw_device(rng, data.num_devices);
        let (hf, vf) = (rng.random::<bool>(), rng.random::<bool>());
        let mut sample = data.sample(s, t, d)?;
        if hf {
            sample = sample.flipped(true);
        }
        if vf {
            sample = sample.flipped(false);
        }
        out.push(sample);
    }
    Ok(out)
}

fn stack<T: Real>(parts: &[Vec<f32>], shape: &[usize]) -> Result<Tensor<T>> {
    let data: Vec<T> = parts.iter().flatten().map(|&v| T::lit(v as f64)).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Network inputs and loss targets for a list of samples.
pub struct TrainBatch<T> {
    pub inputs: Batch<T>,
    /// `[B, 3, H, W]`
    pub gt: Tensor<T>,
    /// `[B, 1, H, W]`
    pub mask: Tensor<T>,
    /// `[B, 4]`
    pub wb_dg: Tensor<T>,
}

/// Stacks samples; `weights` rows default to one-hot device vectors.
pub fn collate<T: Real>(samples: &[Sample], num_devices: usize, weights: Option<&[Vec<f64>]>) -> Result<TrainBatch<T>> {
    let b = samples.len();
    let first = samples.first().ok_or_else(|| invalid!("empty batch"))?;
    let (ph, pw) = (first.x4.height, first.x4.width);
    let x4: Vec<Vec<f32>> = samples.iter().map(|s| s.x4.to_planar()).collect();
    let gt: Vec<Vec<f32>> = samples.iter().map(|s| s.gt.to_planar()).collect();
    let mask: Vec<Vec<f32>> = samples.iter().map(|s| s.mask.data.clone()).collect();
    let wb: Vec<Vec<f32>> = samples.iter().map(|s| s.wb.iter().map(|&v| v as f32).collect()).collect();
    let wb_dg: Vec<Vec<f32>> = samples.iter().map(|s| s.wb_dg.iter().map(|&v| v as f32).collect()).collect();
    let mut ie = Vec::with_capacity(b);
    for s in samples {
        let f = iso_exp_features(s.iso, s.exposure_s)?;
        ie.push(vec![f[0] as f32, f[1] as f32]);
    }
    let w: Vec<Vec<f32>> = match weights {
        Some(w) => w.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect(),
        None => samples
            .iter()
            .map(|s| (0..num_devices).map(|d| if d == s.device { 1.0 } else { 0.0 }).collect())
            .collect(),
    };
    if w.len() != b || w.iter().any(|r| r.len() != num_devices) {
        return Err(invalid!("weights must be {} rows of {} entries", b, num_devices));
    }
    let x_full = match &first.x_full {
        Some(t) => {
            let s = t.shape().to_vec();
            let parts: Vec<Vec<f32>> = samples
                .iter()
                .map(|smp| smp.x_full.as_ref().map(|t| t.data().to_vec()).ok_or_else(|| invalid!("missing full frame")))
                .collect::<Result<_>>()?;
            Some(stack(&parts, &[b, s[0], s[1], s[2]])?)
        }
        None => None,
    };
    Ok(TrainBatch {
        inputs: Batch {
            x4: stack(&x4, &[b, 4, ph, pw])?,
            wb: stack(&wb, &[b, 4])?,
            iso_exp: stack(&ie, &[b, 2])?,
            weights: stack(&w, &[b, num_devices])?,
            x_full,
            coords: samples.iter().map(|s| s.coords).collect(),
        },
        gt: stack(&gt, &[b, 3, 2 * ph, 2 * pw])?,
        mask: stack(&mask, &[b, 1, 2 * ph, 2 * pw])?,
        wb_dg: stack(&wb_dg, &[b, 4])?,
    })
}

/// Reads the manifest stored in a dataset directory.
pub fn open_dataset(dir: &Path) -> Result<Manifest> {
    imageio::read_manifest(&dir.join(MANIFEST_FILE))
}
