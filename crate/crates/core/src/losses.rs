//! Masked reconstruction losses on the autodiff graph and image-quality
//! metrics (PSNR, SSIM, CIEDE2000) for evaluation.
//!
//! Graph losses take NCHW tensors: predictions and targets `[B, 3, H, W]`,
//! masks `[B, 1, H, W]` of 0/1 values.

use std::collections::BTreeMap;

use metaisp_autograd::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize, Serializer};

use crate::color;
use crate::error::{invalid, Result};
use crate::imageio::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_vgg: f64,
    pub lambda_ssim: f64,
    pub lambda_illu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_l1: 1.0, lambda_vgg: 1.0, lambda_ssim: 0.1, lambda_illu: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_l1, self.lambda_vgg, self.lambda_ssim, self.lambda_illu];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid!("loss weights must be non-negative: {:?}", self));
        }
        Ok(())
    }
}

fn check_pair<T: Real>(g: &Graph<T>, y: Var, gt: Var, m: &Tensor<T>) -> Result<()> {
    let (sy, sg) = (g.shape(y), g.shape(gt));
    if sy != sg || sy.len() != 4 {
        return Err(invalid!("prediction {:?} and target {:?} must be equal NCHW shapes", sy, sg));
    }
    let sm = m.shape();
    if sm.len() != 4 || sm[0] != sy[0] || sm[1] != 1 || sm[2] != sy[2] || sm[3] != sy[3] {
        return Err(invalid!("mask {:?} does not match image {:?}", sm, sy));
    }
    Ok(())
}

/// `sum(m * |a - b|) / (C * sum(m))`, zero when the mask is empty.
fn masked_mean_abs<T: Real>(g: &mut Graph<T>, a: Var, b: Var, m: &Tensor<T>) -> Result<Var> {
    let channels = g.shape(a)[1];
    let count = m.sum().to_f64().unwrap();
    if count == 0.0 {
        return Ok(g.scalar(0.0));
    }
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    let mv = g.constant(m.clone());
    let d = g.mul(d, mv)?;
    let s = g.sum_all(d);
    Ok(g.scale(s, 1.0 / (channels as f64 * count)))
}

pub fn masked_l1<T: Real>(g: &mut Graph<T>, y: Var, gt: Var, m: &Tensor<T>) -> Result<Var> {
    check_pair(g, y, gt, m)?;
    masked_mean_abs(g, y, gt, m)
}

/// Area-min 2x downsampling of a `[B, 1, H, W]` mask: a coarse pixel is
/// valid only if its whole footprint is.
pub fn downsample_mask<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    let s = m.shape();
    let (b, h, w) = (s[0], s[2] / 2, s[3] / 2);
    let d = m.data();
    let mut out = Vec::with_capacity(b * h * w);
    for n in 0..b {
        let base = n * s[2] * s[3];
        for i in 0..h {
            for j in 0..w {
                let at = |y: usize, x: usize| d[base + y * s[3] + x];
                let v = at(2 * i, 2 * j).min(at(2 * i, 2 * j + 1)).min(at(2 * i + 1, 2 * j)).min(at(2 * i + 1, 2 * j + 1));
                out.push(v);
            }
        }
    }
    Tensor::new(&[b, 1, h, w], out).expect("consistent mask shape")
}

pub const DEFAULT_FEATURE_SEED: u64 = 1234;
const FEATURE_WIDTHS: [usize; 4] = [3, 8, 16, 32];

/// Fixed random three-stage convolutional feature extractor standing in for
/// a pretrained perceptual network. Weights are He-scaled gaussians drawn
/// from `seed` and never trained.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    weights: Vec<Tensor<f64>>,
}

impl FeatureStack {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = FEATURE_WIDTHS
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let data = (0..cout * cin * 9).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(&[cout, cin, 3, 3], data).expect("shape")
            })
            .collect();
        Self { weights }
    }

    /// Masked L1 between features of `y` and `gt`, averaged over stages.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, y: Var, gt: Var, m: &Tensor<T>) -> Result<Var> {
        check_pair(g, y, gt, m)?;
        let (mut a, mut b) = (y, gt);
        let mut mask = m.clone();
        let mut total: Option<Var> = None;
        for (stage, w) in self.weights.iter().enumerate() {
            if stage > 0 {
                let s = g.shape(a);
                if s[2] < 2 || s[3] < 2 || s[2] % 2 != 0 || s[3] % 2 != 0 {
                    return Err(invalid!("perceptual loss needs spatial dims divisible by 4, got {:?}", s));
                }
                a = g.avg_pool2(a)?;
                b = g.avg_pool2(b)?;
                mask = downsample_mask(&mask);
            }
            let wv = g.constant(w.cast());
            a = g.conv2d(a, wv, None, 1, 1)?;
            a = g.gelu(a);
            b = g.conv2d(b, wv, None, 1, 1)?;
            b = g.gelu(b);
            let l = masked_mean_abs(g, a, b, &mask)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let t = total.expect("three stages");
        Ok(g.scale(t, 1.0 / self.weights.len() as f64))
    }
}

pub fn masked_perceptual<T: Real>(g: &mut Graph<T>, stack: &FeatureStack, y: Var, gt: Var, m: &Tensor<T>) -> Result<Var> {
    stack.loss(g, y, gt, m)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window(channels: usize) -> Tensor<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g1: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g1.iter().sum();
    let mut k = Vec::with_capacity(channels * SSIM_WINDOW * SSIM_WINDOW);
    for _ in 0..channels {
        for a in &g1 {
            for b in &g1 {
                k.push(a * b / (s * s));
            }
        }
    }
    Tensor::new(&[channels, 1, SSIM_WINDOW, SSIM_WINDOW], k).expect("shape")
}

/// Per-pixel SSIM map over valid window positions: `[B, C, H-10, W-10]`.
pub fn ssim_map<T: Real>(g: &mut Graph<T>, y: Var, gt: Var) -> Result<Var> {
    let s = g.shape(y).to_vec();
    if s != g.shape(gt) || s.len() != 4 {
        return Err(invalid!("ssim needs equal NCHW shapes"));
    }
    if s[2] < SSIM_WINDOW || s[3] < SSIM_WINDOW {
        return Err(invalid!("image {}x{} smaller than the {} px SSIM window", s[3], s[2], SSIM_WINDOW));
    }
    let win = g.constant(gaussian_window(s[1]).cast());
    let mu_x = g.depthwise_conv2d(y, win, None, 0)?;
    let mu_y = g.depthwise_conv2d(gt, win, None, 0)?;
    let xx = g.mul(y, y)?;
    let yy = g.mul(gt, gt)?;
    let xy = g.mul(y, gt)?;
    let e_xx = g.depthwise_conv2d(xx, win, None, 0)?;
    let e_yy = g.depthwise_conv2d(yy, win, None, 0)?;
    let e_xy = g.depthwise_conv2d(xy, win, None, 0)?;
    let mx2 = g.mul(mu_x, mu_x)?;
    let my2 = g.mul(mu_y, mu_y)?;
    let mxy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(e_xx, mx2)?;
    let var_y = g.sub(e_yy, my2)?;
    let cov = g.sub(e_xy, mxy)?;
    let n1 = g.scale(mxy, 2.0);
    let n1 = g.add_scalar(n1, SSIM_C1);
    let n2 = g.scale(cov, 2.0);
    let n2 = g.add_scalar(n2, SSIM_C2);
    let d1 = g.add(mx2, my2)?;
    let d1 = g.add_scalar(d1, SSIM_C1);
    let d2 = g.add(var_x, var_y)?;
    let d2 = g.add_scalar(d2, SSIM_C2);
    let num = g.mul(n1, n2)?;
    let den = g.mul(d1, d2)?;
    Ok(g.div(num, den)?)
}

/// Crops a `[B, 1, H, W]` mask to the SSIM map's valid region.
pub fn crop_mask_for_ssim<T: Real>(m: &Tensor<T>) -> Tensor<T> {
    let s = m.shape();
    let r = SSIM_WINDOW / 2;
    let (h, w) = (s[2] - 2 * r, s[3] - 2 * r);
    let mut out = Vec::with_capacity(s[0] * h * w);
    for n in 0..s[0] {
        for y in 0..h {
            let row = n * s[2] * s[3] + (y + r) * s[3] + r;
            out.extend_from_slice(&m.data()[row..row + w]);
        }
    }
    Tensor::new(&[s[0], 1, h, w], out).expect("crop shape")
}

/// Mean of `1 - SSIM` over masked map positions.
pub fn masked_ssim_loss<T: Real>(g: &mut Graph<T>, y: Var, gt: Var, m: &Tensor<T>) -> Result<Var> {
    check_pair(g, y, gt, m)?;
    let map = ssim_map(g, y, gt)?;
    let mc = crop_mask_for_ssim(m);
    let channels = g.shape(map)[1];
    let count = mc.sum().to_f64().unwrap();
    if count == 0.0 {
        return Ok(g.scalar(0.0));
    }
    let one_minus = g.scale(map, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let mv = g.constant(mc);
    let masked = g.mul(one_minus, mv)?;
    let s = g.sum_all(masked);
    Ok(g.scale(s, 1.0 / (channels as f64 * count)))
}

/// Individual loss terms (already unweighted) and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub perceptual: Var,
    pub ssim: Var,
    pub illu: Option<Var>,
}

fn weighted_sum<T: Real>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let t = g.scale(v, w);
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc.expect("non-empty"))
}

pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    stack: &FeatureStack,
    y: Var,
    gt: Var,
    m: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let l1 = masked_l1(g, y, gt, m)?;
    let perceptual = stack.loss(g, y, gt, m)?;
    let ssim = masked_ssim_loss(g, y, gt, m)?;
    let total = weighted_sum(g, &[(l1, w.lambda_l1), (perceptual, w.lambda_vgg), (ssim, w.lambda_ssim)])?;
    Ok(LossTerms { total, l1, perceptual, ssim, illu: None })
}

/// Batch mean of `||wb_d - wb_dg||_1`; both are `[B, 4]`.
pub fn wb_l1<T: Real>(g: &mut Graph<T>, wb_d: Var, wb_dg: &Tensor<T>) -> Result<Var> {
    if g.shape(wb_d) != wb_dg.shape() {
        return Err(invalid!("estimated WB {:?} vs ground truth {:?}", g.shape(wb_d), wb_dg.shape()));
    }
    let batch = wb_dg.shape()[0].max(1);
    let t = g.constant(wb_dg.clone());
    let d = g.sub(wb_d, t)?;
    let d = g.abs(d);
    let s = g.sum_all(d);
    Ok(g.scale(s, 1.0 / batch as f64))
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss_wb<T: Real>(
    g: &mut Graph<T>,
    stack: &FeatureStack,
    y: Var,
    gt: Var,
    m: &Tensor<T>,
    wb_d: Var,
    wb_dg: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossTerms> {
    let base = total_loss(g, stack, y, gt, m, w)?;
    let illu = wb_l1(g, wb_d, wb_dg)?;
    let total = weighted_sum(g, &[(base.total, 1.0), (illu, w.lambda_illu)])?;
    Ok(LossTerms { total, illu: Some(illu), ..base })
}

// ---------------------------------------------------------------------------
// evaluation metrics on images

fn check_images(y: &Image, gt: &Image, mask: Option<&Image>) -> Result<()> {
    if !y.same_dims(gt) {
        return Err(invalid!(
            "image {}x{}x{} vs {}x{}x{}",
            y.width,
            y.height,
            y.channels,
            gt.width,
            gt.height,
            gt.channels
        ));
    }
    if let Some(m) = mask {
        if m.width != y.width || m.height != y.height || m.channels != 1 {
            return Err(invalid!("mask does not match image"));
        }
    }
    Ok(())
}

fn mask_at(mask: Option<&Image>, i: usize) -> bool {
    mask.is_none_or(|m| m.data[i] > 0.5)
}

/// Mean squared error over (masked) pixels; `None` when nothing is selected.
pub fn mse(y: &Image, gt: &Image, mask: Option<&Image>) -> Result<Option<f64>> {
    check_images(y, gt, mask)?;
    let c = y.channels;
    let (mut s, mut n) = (0.0f64, 0usize);
    for (i, (a, b)) in y.data.chunks(c).zip(gt.data.chunks(c)).enumerate() {
        if mask_at(mask, i) {
            s += a.iter().zip(b).map(|(p, q)| ((p - q) as f64).powi(2)).sum::<f64>();
            n += c;
        }
    }
    Ok((n > 0).then(|| s / n as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR with peak 1; identical images give `f64::INFINITY`.
pub fn psnr(y: &Image, gt: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(y, gt, None)?.unwrap_or(0.0)))
}

pub fn psnr_masked(y: &Image, gt: &Image, mask: &Image) -> Result<Option<f64>> {
    Ok(mse(y, gt, Some(mask))?.map(psnr_from_mse))
}

fn to_nchw(img: &Image) -> Tensor<f64> {
    let planar: Vec<f64> = img.to_planar().into_iter().map(|v| v as f64).collect();
    Tensor::new(&[1, img.channels, img.height, img.width], planar).expect("image shape")
}

fn ssim_values(y: &Image, gt: &Image) -> Result<Tensor<f64>> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(to_nchw(y));
    let b = g.constant(to_nchw(gt));
    let map = ssim_map(&mut g, a, b)?;
    Ok(g.value(map).clone())
}

/// Mean SSIM over all valid window positions and channels.
pub fn ssim(y: &Image, gt: &Image) -> Result<f64> {
    check_images(y, gt, None)?;
    let map = ssim_values(y, gt)?;
    Ok(map.sum() / map.numel() as f64)
}

/// Mean SSIM over masked positions of the (cropped) map.
pub fn ssim_masked(y: &Image, gt: &Image, mask: &Image) -> Result<Option<f64>> {
    check_images(y, gt, Some(mask))?;
    let map = ssim_values(y, gt)?;
    let m = crop_mask_for_ssim(&to_nchw(mask));
    let (c, hw) = (y.channels, m.numel());
    let (mut s, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for (i, &mv) in m.data().iter().enumerate() {
            if mv > 0.5 {
                s += map.data()[ch * hw + i];
                n += 1;
            }
        }
    }
    Ok((n > 0).then(|| s / n as f64))
}

fn delta_e_impl(y: &Image, gt: &Image, mask: Option<&Image>) -> Result<Option<f64>> {
    check_images(y, gt, mask)?;
    if y.channels != 3 {
        return Err(invalid!("delta E needs RGB images"));
    }
    let (mut s, mut n) = (0.0, 0usize);
    for (i, (a, b)) in y.data.chunks(3).zip(gt.data.chunks(3)).enumerate() {
        if mask_at(mask, i) {
            let la = color::srgb_to_lab([a[0] as f64, a[1] as f64, a[2] as f64]);
            let lb = color::srgb_to_lab([b[0] as f64, b[1] as f64, b[2] as f64]);
            s += color::ciede2000(la, lb);
            n += 1;
        }
    }
    Ok((n > 0).then(|| s / n as f64))
}

/// Mean per-pixel CIEDE2000 between two sRGB images.
pub fn delta_e(y: &Image, gt: &Image) -> Result<f64> {
    Ok(delta_e_impl(y, gt, None)?.unwrap_or(0.0))
}

pub fn delta_e_masked(y: &Image, gt: &Image, mask: &Image) -> Result<Option<f64>> {
    delta_e_impl(y, gt, Some(mask))
}

/// Writes infinite values as the string `"inf"`.
fn ser_metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_metric<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Num {
        F(f64),
        S(String),
    }
    match Num::deserialize(d)? {
        Num::F(v) => Ok(v),
        Num::S(s) if s == "inf" => Ok(f64::INFINITY),
        Num::S(s) => Err(serde::de::Error::custom(format!("bad metric value {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetrics {
    pub device_id: u32,
    #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric")]
    pub psnr: f64,
    pub delta_e: f64,
    pub ssim: f64,
    pub images: usize,
}

/// Per-device metric table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub devices: Vec<DeviceMetrics>,
    /// Pairs that could not be evaluated, with the reason.
    pub missing: Vec<String>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn mean_psnr(&self) -> f64 {
        self.devices.iter().map(|d| d.psnr).sum::<f64>() / self.devices.len().max(1) as f64
    }

    pub fn device(&self, id: u32) -> Option<&DeviceMetrics> {
        self.devices.iter().find(|d| d.device_id == id)
    }

    /// Aligned text table: one row per device, PSNR, ΔE, SSIM columns.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8} {:>9} {:>8} {:>8} {:>7}\n", "device", "PSNR", "dE00", "SSIM", "images");
        for d in &self.devices {
            let p = if d.psnr.is_infinite() { "inf".to_string() } else { format!("{:.2}", d.psnr) };
            out += &format!("{:<8} {:>9} {:>8.3} {:>8.4} {:>7}\n", d.device_id, p, d.delta_e, d.ssim, d.images);
        }
        if !self.missing.is_empty() {
            out += &format!("missing: {}\n", self.missing.join(", "));
        }
        out
    }
}

/// Collects per-image metrics and averages them per device.
#[derive(Default)]
pub struct MetricAccumulator {
    per_device: BTreeMap<u32, Vec<[f64; 3]>>,
    missing: Vec<String>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one prediction/target pair; an all-masked pair is recorded as missing.
    pub fn add(&mut self, device: u32, label: &str, y: &Image, gt: &Image, mask: &Image) -> Result<()> {
        let p = psnr_masked(y, gt, mask)?;
        let d = delta_e_masked(y, gt, mask)?;
        let s = ssim_masked(y, gt, mask)?;
        match (p, d, s) {
            (Some(p), Some(d), Some(s)) => self.per_device.entry(device).or_default().push([p, d, s]),
            _ => self.missing.push(format!("{label}: no valid pixels")),
        }
        Ok(())
    }

    pub fn add_missing(&mut self, label: String) {
        self.missing.push(label);
    }

    pub fn finish(self, split: &str) -> MetricReport {
        let devices = self
            .per_device
            .into_iter()
            .map(|(device_id, rows)| {
                let n = rows.len() as f64;
                let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / n;
                DeviceMetrics { device_id, psnr: mean(0), delta_e: mean(1), ssim: mean(2), images: rows.len() }
            })
            .collect();
        MetricReport { split: split.to_string(), devices, missing: self.missing }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, f: impl Fn(usize) -> f32) -> Image {
        Image::new(w, h, 3, (0..w * h * 3).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_of_known_mse() {
        let a = img(4, 4, |_| 0.5);
        let b = img(4, 4, |_| 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_closed_form_for_constants() {
        let a = img(16, 16, |_| 0.5);
        let b = img(16, 16, |_| 0.6);
        let expected = (0.6 + 1e-4) / (0.61 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&img(8, 8, |_| 0.1), &img(8, 8, |_| 0.1)).is_err());
    }

    #[test]
    fn black_white_delta_e() {
        let a = img(2, 2, |_| 0.0);
        let b = img(2, 2, |_| 1.0);
        assert!((delta_e(&a, &b).unwrap() - 100.0).abs() < 1e-3);
        assert_eq!(delta_e(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn inf_psnr_serializes_as_sentinel() {
        let r = MetricReport {
            split: "test".into(),
            devices: vec![DeviceMetrics { device_id: 0, psnr: f64::INFINITY, delta_e: 0.0, ssim: 1.0, images: 1 }],
            missing: vec![],
        };
        let js = r.to_json().unwrap();
        assert!(js.contains("\"psnr\": \"inf\""), "{js}");
        let back: MetricReport = serde_json::from_str(&js).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("inf"));
    }

    #[test]
    fn mask_downsampling_is_area_min() {
        let m = Tensor::<f64>::from_f64(&[1, 1, 2, 4], &[1., 1., 1., 0., 1., 1., 1., 1.]).unwrap();
        assert_eq!(downsample_mask(&m).data(), &[1.0, 0.0]);
    }
}
