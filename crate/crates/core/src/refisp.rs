//! Deterministic reference ISP, its inverse, and a generator of distinct
//! parametric device styles.
//!
//! Forward stage order is fixed: normalize, white balance, bilinear
//! demosaic, then the style stages gains, color matrix, saturation, tone
//! curve, gamma encode and clamp.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::color::{self, COLOR_CHECKER_LINEAR};
use crate::error::{invalid, Result};
use crate::imageio::{ColorSpace, Image, RawImage, RawMeta, RgbImage};

/// Parametric rendition of one device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    /// Row-major 3x3 color matrix on linear RGB; rows sum to one.
    pub ccm: [[f64; 3]; 3],
    pub gains: [f64; 3],
    /// Monotone piecewise-linear tone curve `(input, output)` on `[0, 1]`.
    pub tone_knots: Vec<[f64; 2]>,
    pub gamma: f64,
    pub saturation: f64,
}

impl StyleParams {
    pub fn identity() -> Self {
        Self {
            ccm: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gains: [1.0; 3],
            tone_knots: vec![[0.0, 0.0], [1.0 / 3.0, 1.0 / 3.0], [2.0 / 3.0, 2.0 / 3.0], [1.0, 1.0]],
            gamma: 2.2,
            saturation: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.ccm.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(invalid!("ccm row {} sums to {}, expected 1", i, s));
            }
        }
        if self.gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(invalid!("style gains must be positive: {:?}", self.gains));
        }
        let k = &self.tone_knots;
        if k.len() < 4 {
            return Err(invalid!("tone curve needs at least 4 knots, got {}", k.len()));
        }
        if k[0] != [0.0, 0.0] || k[k.len() - 1] != [1.0, 1.0] {
            return Err(invalid!("tone curve endpoints must be (0,0) and (1,1)"));
        }
        if k.windows(2).any(|w| !(w[1][0] > w[0][0] && w[1][1] > w[0][1])) {
            return Err(invalid!("tone knots must be strictly increasing in both coordinates"));
        }
        if !(1.8..=2.6).contains(&self.gamma) {
            return Err(invalid!("gamma {} outside [1.8, 2.6]", self.gamma));
        }
        if !(self.saturation.is_finite() && self.saturation >= 0.0) {
            return Err(invalid!("saturation must be non-negative, got {}", self.saturation));
        }
        Ok(())
    }

    pub fn tone(&self, v: f64) -> f64 {
        piecewise(&self.tone_knots, v.clamp(0.0, 1.0), false)
    }

    pub fn tone_inverse(&self, v: f64) -> f64 {
        piecewise(&self.tone_knots, v.clamp(0.0, 1.0), true)
    }

    /// Style stages on one linear RGB value, returning display-encoded RGB.
    pub fn render(&self, rgb: [f64; 3]) -> [f64; 3] {
        let g = [rgb[0] * self.gains[0], rgb[1] * self.gains[1], rgb[2] * self.gains[2]];
        let m = mat_vec(&self.ccm, g);
        let l = color::luma(m);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let s = l + self.saturation * (m[c] - l);
            let t = self.tone(s);
            out[c] = t.powf(1.0 / self.gamma).clamp(0.0, 1.0);
        }
        out
    }

    /// Inverts [`StyleParams::render`] for in-gamut values.
    pub fn unrender(&self, srgb: [f64; 3], ccm_inv: &[[f64; 3]; 3]) -> [f64; 3] {
        let mut s = [0.0; 3];
        for c in 0..3 {
            s[c] = self.tone_inverse(srgb[c].clamp(0.0, 1.0).powf(self.gamma));
        }
        let l = color::luma(s);
        let mut m = [0.0; 3];
        for c in 0..3 {
            m[c] = l + (s[c] - l) / self.saturation;
        }
        let g = mat_vec(ccm_inv, m);
        [g[0] / self.gains[0], g[1] / self.gains[1], g[2] / self.gains[2]]
    }
}

fn piecewise(knots: &[[f64; 2]], v: f64, inverse: bool) -> f64 {
    let (xi, yi) = if inverse { (1, 0) } else { (0, 1) };
    for w in knots.windows(2) {
        let (a, b) = (w[0], w[1]);
        if v <= b[xi] {
            let t = (v - a[xi]) / (b[xi] - a[xi]);
            return a[yi] + t * (b[yi] - a[yi]);
        }
    }
    knots[knots.len() - 1][yi]
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Inverse of a 3x3 matrix, `None` when (numerically) singular.
pub fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-9 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // adjugate: transpose of the cofactor matrix
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) * inv_det;
        }
    }
    Some(out)
}

/// One target device: its rendition style plus how it chooses the scene
/// white balance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DevicePreset {
    pub device_id: u32,
    pub name: String,
    pub style: StyleParams,
    /// Multiplier applied to the scene illuminant gains (RGBG order).
    pub wb_bias: [f64; 4],
    /// Fraction of the scene cast the device removes (1 = full correction).
    #[serde(default = "one")]
    pub wb_adaptation: f64,
}

fn one() -> f64 {
    1.0
}

impl DevicePreset {
    /// White balance this device picks for a scene whose neutral gains are
    /// `scene_wb`: partial adaptation towards the scene cast, then the bias.
    /// Greens stay exactly 1.
    pub fn device_wb(&self, scene_wb: &[f64; 4]) -> [f64; 4] {
        let mut out = [1.0; 4];
        for c in [0, 3] {
            out[c] = (scene_wb[c] / scene_wb[1]).powf(self.wb_adaptation) * self.wb_bias[c] / self.wb_bias[1];
        }
        out
    }
}

/// CFA color index (0 = R, 1 = G, 2 = B) of an RGGB site.
#[inline]
pub fn cfa_color(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Position within the 2x2 tile in R, G1, G2, B order.
#[inline]
pub fn cfa_site(y: usize, x: usize) -> usize {
    (y % 2) * 2 + x % 2
}

/// Single-channel float mosaic normalized by the black/white levels.
pub fn normalize_mosaic(raw: &RawImage) -> Image {
    let (bl, wl) = (raw.meta.black_level as f64, raw.meta.white_level as f64);
    let data = raw.mosaic.iter().map(|&v| crate::imageio::normalize_raw(v as f64, bl, wl)).collect();
    Image { width: raw.width, height: raw.height, channels: 1, data }
}

fn check_gains(gains: &[f64]) -> Result<()> {
    if gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
        return Err(invalid!("white-balance gains must be positive: {:?}", gains));
    }
    Ok(())
}

/// Channel-wise white balance of a packed (4-channel) or RGB image.
pub fn apply_wb(img: &Image, gains: &[f64]) -> Result<Image> {
    check_gains(gains)?;
    if gains.len() != img.channels {
        return Err(invalid!("{} gains for a {}-channel image", gains.len(), img.channels));
    }
    let mut out = img.clone();
    for px in out.data.chunks_mut(img.channels) {
        for (v, g) in px.iter_mut().zip(gains) {
            *v = (*v as f64 * g) as f32;
        }
    }
    Ok(out)
}

/// White balance applied in place on a single-channel RGGB mosaic.
pub fn apply_wb_mosaic(mosaic: &Image, gains: &[f64; 4]) -> Result<Image> {
    check_gains(gains)?;
    if mosaic.channels != 1 {
        return Err(invalid!("mosaic white balance needs a single-channel mosaic"));
    }
    let mut out = mosaic.clone();
    for y in 0..mosaic.height {
        for x in 0..mosaic.width {
            let i = y * mosaic.width + x;
            out.data[i] = (out.data[i] as f64 * gains[cfa_site(y, x)]) as f32;
        }
    }
    Ok(out)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Bilinear demosaic of a single-channel RGGB mosaic. Each missing color is
/// the mean of the nearest same-color sites; beyond the border the
/// same-color plane is edge-replicated.
pub fn demosaic_bilinear(mosaic: &Image) -> Result<Image> {
    if mosaic.channels != 1 || mosaic.width % 2 != 0 || mosaic.height % 2 != 0 || mosaic.width < 2 || mosaic.height < 2 {
        return Err(invalid!("demosaic needs an even-sized single-channel mosaic"));
    }
    let (w, h) = (mosaic.width, mosaic.height);
    let at = |y: isize, x: isize| mosaic.data[reflect(y, h) * w + reflect(x, w)] as f64;
    let mut out = Image::zeros(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            let site = cfa_color(y, x);
            let center = at(yi, xi);
            let cross = (at(yi - 1, xi) + at(yi + 1, xi) + at(yi, xi - 1) + at(yi, xi + 1)) / 4.0;
            let diag = (at(yi - 1, xi - 1) + at(yi - 1, xi + 1) + at(yi + 1, xi - 1) + at(yi + 1, xi + 1)) / 4.0;
            let horiz = (at(yi, xi - 1) + at(yi, xi + 1)) / 2.0;
            let vert = (at(yi - 1, xi) + at(yi + 1, xi)) / 2.0;
            let rgb = match site {
                0 => [center, cross, diag],
                2 => [diag, cross, center],
                _ if y % 2 == 0 => [horiz, center, vert], // green on a red row
                _ => [vert, center, horiz],               // green on a blue row
            };
            for c in 0..3 {
                out.set(y, x, c, rgb[c] as f32);
            }
        }
    }
    Ok(out)
}

/// Style stages on a linear image, producing an sRGB-tagged image.
pub fn apply_style(linear: &Image, style: &StyleParams) -> Result<RgbImage> {
    if linear.channels != 3 {
        return Err(invalid!("style needs a 3-channel image"));
    }
    let mut out = linear.clone();
    for px in out.data.chunks_mut(3) {
        let r = style.render([px[0] as f64, px[1] as f64, px[2] as f64]);
        for c in 0..3 {
            px[c] = r[c] as f32;
        }
    }
    RgbImage::new(out, ColorSpace::Srgb)
}

pub fn forward_isp(raw: &RawImage, style: &StyleParams) -> Result<RgbImage> {
    raw.validate()?;
    let norm = normalize_mosaic(raw);
    let balanced = apply_wb_mosaic(&norm, &raw.meta.wb_gains)?;
    let linear = demosaic_bilinear(&balanced)?;
    apply_style(&linear, style)
}

/// Heteroscedastic gaussian sensor noise on the normalized signal:
/// variance `shot_gain * signal + read_sigma^2`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseParams {
    pub shot_gain: f64,
    pub read_sigma: f64,
}

impl NoiseParams {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn is_off(&self) -> bool {
        self.shot_gain == 0.0 && self.read_sigma == 0.0
    }
}

/// Un-renders an sRGB image into a RAW mosaic with the given metadata:
/// inverts gamma, tone, saturation, color matrix and gains, divides by the
/// white-balance gains, samples the RGGB pattern, adds seeded noise and
/// quantizes to `[black_level, white_level]`.
pub fn inverse_isp(
    srgb: &RgbImage,
    style: &StyleParams,
    meta: &RawMeta,
    noise: NoiseParams,
    seed: u64,
) -> Result<RawImage> {
    inverse_isp_scaled(srgb, style, meta, noise, seed, 1.0)
}

/// [`inverse_isp`] with the linear signal multiplied by `exposure_scale`
/// before mosaicking (under- or over-exposed captures).
pub fn inverse_isp_scaled(
    srgb: &RgbImage,
    style: &StyleParams,
    meta: &RawMeta,
    noise: NoiseParams,
    seed: u64,
    exposure_scale: f64,
) -> Result<RawImage> {
    meta.validate()?;
    if style.saturation <= 0.0 {
        return Err(invalid!("saturation 0 is not invertible"));
    }
    let ccm_inv = invert3(&style.ccm).ok_or_else(|| invalid!("color matrix is singular"))?;
    let (w, h) = (srgb.width(), srgb.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(invalid!("inverse ISP needs even dimensions, got {}x{}", w, h));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bl, wl) = (meta.black_level as f64, meta.white_level as f64);
    let mut mosaic = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let px = srgb.image.pixel(y, x);
            let lin = style.unrender([px[0] as f64, px[1] as f64, px[2] as f64], &ccm_inv);
            let mut s = lin[cfa_color(y, x)] * exposure_scale / meta.wb_gains[cfa_site(y, x)];
            s = s.max(0.0);
            if !noise.is_off() {
                let sigma = (noise.shot_gain * s + noise.read_sigma * noise.read_sigma).sqrt();
                let z: f64 = StandardNormal.sample(&mut rng);
                s += sigma * z;
            }
            let counts = (bl + s * (wl - bl)).round().clamp(bl, wl);
            mosaic.push(counts as u16);
        }
    }
    RawImage::new(w, h, mosaic, meta.clone())
}

/// Side of each color-checker patch in the rendered chart, in pixels.
const CHECKER_PATCH: usize = 8;

/// RAW capture of the 24-patch checker (6 x 4 patches) with neutral
/// white balance at the mosaic level and the given device gains in the
/// metadata.
pub fn checker_raw(wb: [f64; 4]) -> RawImage {
    let (pw, ph) = (6, 4);
    let (w, h) = (pw * CHECKER_PATCH, ph * CHECKER_PATCH);
    let meta = RawMeta { black_level: 0, white_level: 16383, wb_gains: wb, iso: 100.0, exposure_s: 0.01, device_id: None };
    let mut mosaic = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let patch = (y / CHECKER_PATCH) * pw + x / CHECKER_PATCH;
            let v = COLOR_CHECKER_LINEAR[patch][cfa_color(y, x)] / wb[cfa_site(y, x)];
            mosaic.push((v * 16383.0).round().clamp(0.0, 16383.0) as u16);
        }
    }
    RawImage::new(w, h, mosaic, meta).expect("checker chart is well-formed")
}

/// Rendered checker patch colors (sRGB) of a device: center pixel of each patch.
pub fn render_checker(preset: &DevicePreset) -> Result<Vec<[f64; 3]>> {
    let raw = checker_raw(preset.device_wb(&[1.0; 4]));
    let img = forward_isp(&raw, &preset.style)?;
    let mut out = Vec::with_capacity(24);
    for p in 0..24 {
        let (py, px) = (p / 6, p % 6);
        let (y, x) = (py * CHECKER_PATCH + CHECKER_PATCH / 2, px * CHECKER_PATCH + CHECKER_PATCH / 2);
        let v = img.image.pixel(y, x);
        out.push([v[0] as f64, v[1] as f64, v[2] as f64]);
    }
    Ok(out)
}

/// Mean CIEDE2000 between two devices' renditions of the checker.
pub fn checker_distance(a: &DevicePreset, b: &DevicePreset) -> Result<f64> {
    let (ra, rb) = (render_checker(a)?, render_checker(b)?);
    let total: f64 = ra
        .iter()
        .zip(&rb)
        .map(|(x, y)| color::ciede2000(color::srgb_to_lab(*x), color::srgb_to_lab(*y)))
        .sum();
    Ok(total / ra.len() as f64)
}

/// Minimum pairwise checker distance separating generated presets.
pub const MIN_STYLE_DISTANCE: f64 = 5.0;
const MAX_STYLE_ATTEMPTS: usize = 1000;

fn sample_style(rng: &mut ChaCha8Rng) -> StyleParams {
    let mut ccm = [[0.0; 3]; 3];
    for (i, row) in ccm.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                *v = rng.random_range(-0.25..0.15);
            }
        }
        row[i] = 1.0 - row.iter().sum::<f64>();
    }
    let gains = [rng.random_range(0.8..1.2), rng.random_range(0.9..1.1), rng.random_range(0.8..1.2)];
    // S-ish curve: perturb interior knots of an identity curve, keep monotone
    let n = rng.random_range(4..=6usize);
    let mut knots = vec![[0.0, 0.0]];
    for i in 1..n - 1 {
        let x = i as f64 / (n - 1) as f64;
        let contrast = rng.random_range(-0.08..0.08);
        let lift = rng.random_range(-0.05..0.08);
        let y = (x + contrast * (x - 0.5).signum() * (0.5 - (x - 0.5).abs()) * 2.0 + lift * x * (1.0 - x) * 4.0)
            .clamp(0.02, 0.98);
        knots.push([x, y]);
    }
    knots.push([1.0, 1.0]);
    for i in 1..knots.len() {
        if knots[i][1] <= knots[i - 1][1] + 1e-3 {
            knots[i][1] = knots[i - 1][1] + 1e-3;
        }
    }
    let last = knots.len() - 1;
    knots[last] = [1.0, 1.0];
    StyleParams {
        ccm,
        gains,
        tone_knots: knots,
        gamma: rng.random_range(1.8..2.6),
        saturation: rng.random_range(0.7..1.4),
    }
}

/// Draws `k` presets whose pairwise checker distance is at least
/// [`MIN_STYLE_DISTANCE`]. Deterministic in `seed`.
pub fn make_device_styles(k: usize, seed: u64) -> Result<Vec<DevicePreset>> {
    if k == 0 {
        return Err(invalid!("need at least one device"));
    }
    if k == 1 {
        return Ok(vec![DevicePreset {
            device_id: 0,
            name: "device-0".into(),
            style: StyleParams::identity(),
            wb_bias: [1.0; 4],
            wb_adaptation: 1.0,
        }]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut presets: Vec<DevicePreset> = Vec::with_capacity(k);
    let mut attempts = 0;
    while presets.len() < k {
        attempts += 1;
        if attempts > MAX_STYLE_ATTEMPTS {
            return Err(invalid!(
                "could not find {} styles {} CIEDE2000 apart within {} attempts",
                k,
                MIN_STYLE_DISTANCE,
                MAX_STYLE_ATTEMPTS
            ));
        }
        let id = presets.len() as u32;
        let candidate = DevicePreset {
            device_id: id,
            name: format!("device-{id}"),
            style: sample_style(&mut rng),
            wb_bias: [rng.random_range(0.85..1.18), 1.0, 1.0, rng.random_range(0.85..1.18)],
            wb_adaptation: rng.random_range(0.6..1.0),
        };
        candidate.style.validate()?;
        let mut ok = true;
        for p in &presets {
            if checker_distance(p, &candidate)? < MIN_STYLE_DISTANCE {
                ok = false;
                break;
            }
        }
        if ok {
            presets.push(candidate);
        }
    }
    Ok(presets)
}
