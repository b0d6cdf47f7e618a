//! On-disk artifacts: RAW mosaics (16-bit PGM + JSON sidecar), sRGB images
//! (8-bit PPM), Middlebury `.flo` flow fields, `MICK1` checkpoints and
//! JSON Lines dataset manifests.
//!
//! All writers are byte-deterministic for identical inputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use metaisp_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// CFA layout tag. Only RGGB mosaics are supported.
pub const CFA_RGGB: &str = "RGGB";

/// Capture metadata consumed by the network and the reference ISP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMeta {
    pub black_level: u16,
    pub white_level: u16,
    /// White-balance multipliers in R, G1, G2, B order.
    pub wb_gains: [f64; 4],
    pub iso: f64,
    pub exposure_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_id: Option<u32>,
}

impl RawMeta {
    pub fn validate(&self) -> Result<()> {
        if self.black_level >= self.white_level {
            return Err(invalid!(
                "black level {} must be below white level {}",
                self.black_level,
                self.white_level
            ));
        }
        if self.wb_gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(invalid!("white-balance gains must be positive: {:?}", self.wb_gains));
        }
        if !(self.iso.is_finite() && self.iso > 0.0) {
            return Err(invalid!("iso must be positive, got {}", self.iso));
        }
        if !(self.exposure_s.is_finite() && self.exposure_s > 0.0) {
            return Err(invalid!("exposure must be positive, got {}", self.exposure_s));
        }
        Ok(())
    }
}

/// Bayer sensor mosaic with its metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// Row-major sensor counts.
    pub mosaic: Vec<u16>,
    pub cfa: String,
    pub meta: RawMeta,
}

impl RawImage {
    pub fn new(width: usize, height: usize, mosaic: Vec<u16>, meta: RawMeta) -> Result<Self> {
        let raw = Self { width, height, mosaic, cfa: CFA_RGGB.to_string(), meta };
        raw.validate()?;
        Ok(raw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cfa != CFA_RGGB {
            return Err(invalid!("unsupported CFA pattern {:?}", self.cfa));
        }
        if self.width % 2 != 0 || self.height % 2 != 0 || self.width == 0 || self.height == 0 {
            return Err(invalid!("mosaic dimensions must be even and non-zero, got {}x{}", self.width, self.height));
        }
        if self.mosaic.len() != self.width * self.height {
            return Err(invalid!("mosaic holds {} samples for {}x{}", self.mosaic.len(), self.width, self.height));
        }
        self.meta.validate()?;
        if let Some(v) = self.mosaic.iter().find(|&&v| v > self.meta.white_level) {
            return Err(invalid!("value exceeds white level ({} > {})", v, self.meta.white_level));
        }
        Ok(())
    }

    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.mosaic[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Srgb,
    Linear,
}

/// Interleaved float image with any channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(invalid!(
                "image buffer holds {} values for {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            ));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let mut data = Vec::with_capacity(width * height * value.len());
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        Self { width, height, channels: value.len(), data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Sub-rectangle copy.
    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Image> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(invalid!(
                "crop {}x{} at ({}, {}) exceeds {}x{}",
                width,
                height,
                y0,
                x0,
                self.width,
                self.height
            ));
        }
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Image { width, height, channels: self.channels, data })
    }

    /// Channel-planar copy (`C x H x W`), the layout the network consumes.
    pub fn to_planar(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0; hw * self.channels];
        for (p, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + p] = v;
            }
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, channels: usize, planar: &[f32]) -> Result<Image> {
        let hw = width * height;
        if planar.len() != hw * channels {
            return Err(invalid!("planar buffer holds {} values for {}x{}x{}", planar.len(), width, height, channels));
        }
        let mut data = vec![0.0; hw * channels];
        for c in 0..channels {
            for p in 0..hw {
                data[p * channels + c] = planar[c * hw + p];
            }
        }
        Ok(Image { width, height, channels, data })
    }
}

/// Three-channel image in `[0, 1]` with its color-space tag.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub image: Image,
    pub colorspace: ColorSpace,
}

impl RgbImage {
    pub fn new(image: Image, colorspace: ColorSpace) -> Result<Self> {
        if image.channels != 3 {
            return Err(invalid!("rgb image needs 3 channels, got {}", image.channels));
        }
        Ok(Self { image, colorspace })
    }

    pub fn srgb(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Image::new(width, height, 3, data)?, ColorSpace::Srgb)
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

/// Dense displacement field in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, u: vec![0.0; width * height], v: vec![0.0; width * height] }
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        Self { width, height, u: vec![u; width * height], v: vec![v; width * height] }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if self.u.len() != n || self.v.len() != n {
            return Err(invalid!("flow buffers do not match {}x{}", self.width, self.height));
        }
        if self.u.iter().chain(&self.v).any(|v| !v.is_finite()) {
            return Err(invalid!("flow contains non-finite values"));
        }
        Ok(())
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<FlowField> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(invalid!("flow crop exceeds {}x{}", self.width, self.height));
        }
        let mut u = Vec::with_capacity(width * height);
        let mut v = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            let s = y * self.width + x0;
            u.extend_from_slice(&self.u[s..s + width]);
            v.extend_from_slice(&self.v[s..s + width]);
        }
        Ok(FlowField { width, height, u, v })
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary netpbm header, returning `(magic, width, height, maxval, payload offset)`.
fn parse_pnm_header(bytes: &[u8], path: &Path) -> Result<(String, usize, usize, usize, usize)> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated netpbm header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() {
        return Err(Error::format(path, "missing netpbm payload"));
    }
    pos += 1;
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad {} {:?} in netpbm header", what, s)))
    };
    Ok((tokens[0].clone(), num(&tokens[1], "width")?, num(&tokens[2], "height")?, num(&tokens[3], "maxval")?, pos))
}

/// Sidecar path holding [`RawMeta`] next to a RAW file: `<stem>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    cfa: String,
    #[serde(flatten)]
    meta: RawMeta,
}

pub fn read_raw(path: &Path) -> Result<RawImage> {
    let side = sidecar_path(path);
    let side_text = fs::read_to_string(&side).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::format(path, format!("missing metadata sidecar {}", side.display()))
        } else {
            Error::io(&side, e)
        }
    })?;
    let sidecar: Sidecar = serde_json::from_str(&side_text)
        .map_err(|e| Error::format(&side, format!("bad sidecar: {e}")))?;
    let bytes = read_bytes(path)?;
    let (magic, width, height, maxval, off) = parse_pnm_header(&bytes, path)?;
    if magic != "P5" {
        return Err(Error::format(path, format!("expected P5 PGM, found {magic:?}")));
    }
    if maxval != 65535 {
        return Err(Error::format(path, format!("expected maxval 65535, found {maxval}")));
    }
    let need = width * height * 2;
    if bytes.len() - off != need {
        return Err(Error::format(path, format!("payload has {} bytes, expected {}", bytes.len() - off, need)));
    }
    let mosaic = bytes[off..].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    let raw = RawImage { width, height, mosaic, cfa: sidecar.cfa, meta: sidecar.meta };
    raw.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(raw)
}

pub fn write_raw(raw: &RawImage, path: &Path) -> Result<()> {
    raw.validate()?;
    let mut bytes = format!("P5\n{} {}\n65535\n", raw.width, raw.height).into_bytes();
    bytes.reserve(raw.mosaic.len() * 2);
    for v in &raw.mosaic {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    write_bytes(path, &bytes)?;
    let sidecar = Sidecar { cfa: raw.cfa.clone(), meta: raw.meta.clone() };
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    write_bytes(&sidecar_path(path), text.as_bytes())
}

/// Float to 8-bit storage: clamp to `[0, 1]`, scale, round half away from zero.
pub fn to_byte(v: f32) -> u8 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (c as f64 * 255.0).round() as u8
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = read_bytes(path)?;
    let (magic, width, height, maxval, off) = parse_pnm_header(&bytes, path)?;
    if magic != "P6" {
        return Err(Error::format(path, format!("expected P6 PPM, found {magic:?}")));
    }
    if maxval != 255 {
        return Err(Error::format(path, format!("expected maxval 255, found {maxval}")));
    }
    if bytes.len() - off != width * height * 3 {
        return Err(Error::format(path, "PPM payload size does not match header"));
    }
    let data = bytes[off..].iter().map(|&b| b as f32 / 255.0).collect();
    RgbImage::srgb(width, height, data)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut bytes = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend(img.image.data.iter().map(|&v| to_byte(v)));
    bytes
}

pub fn write_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    write_bytes(path, &encode_ppm(img))
}

/// Single-channel image as an 8-bit P5 PGM (masks are written as 0/255).
pub fn write_gray(img: &Image, path: &Path) -> Result<()> {
    if img.channels != 1 {
        return Err(invalid!("grayscale output needs 1 channel, got {}", img.channels));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(img.data.iter().map(|&v| to_byte(v)));
    write_bytes(path, &bytes)
}

/// Middlebury flow magic, the float32 spelling of "PIEH".
pub const FLOW_MAGIC: f32 = 202021.25;

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated flow header"));
    }
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLOW_MAGIC {
        return Err(Error::format(path, "bad flow magic"));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("bad flow dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    if bytes.len() != 12 + w * h * 8 {
        return Err(Error::format(path, "flow payload size does not match header"));
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for px in bytes[12..].chunks_exact(8) {
        u.push(f32::from_le_bytes(px[0..4].try_into().unwrap()));
        v.push(f32::from_le_bytes(px[4..8].try_into().unwrap()));
    }
    let flow = FlowField { width: w, height: h, u, v };
    flow.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(flow)
}

pub fn write_flow(flow: &FlowField, path: &Path) -> Result<()> {
    flow.validate()?;
    let mut bytes = Vec::with_capacity(12 + flow.u.len() * 8);
    bytes.extend_from_slice(&FLOW_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(flow.width as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        bytes.extend_from_slice(&u.to_le_bytes());
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// `(v - bl) / (wl - bl)` clamped to `[0, 1]`.
pub fn normalize_raw(counts: f64, black_level: f64, white_level: f64) -> f32 {
    debug_assert!(black_level < white_level);
    ((counts - black_level) / (white_level - black_level)).clamp(0.0, 1.0) as f32
}

/// Packs an RGGB mosaic into a half-resolution 4-channel image, channel
/// order R, G1 (top-right), G2 (bottom-left), B, normalized by the black and
/// white levels.
pub fn pack_rggb(raw: &RawImage) -> Result<Image> {
    if raw.width % 2 != 0 || raw.height % 2 != 0 {
        return Err(invalid!("cannot pack odd-sized mosaic {}x{}", raw.width, raw.height));
    }
    let (bl, wl) = (raw.meta.black_level as f64, raw.meta.white_level as f64);
    let (w, h) = (raw.width / 2, raw.height / 2);
    let mut data = Vec::with_capacity(w * h * 4);
    for i in 0..h {
        for j in 0..w {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                data.push(normalize_raw(raw.at(2 * i + dy, 2 * j + dx) as f64, bl, wl));
            }
        }
    }
    Image::new(w, h, 4, data)
}

/// One named tensor in a checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    tensors: Vec<TensorEntry>,
    config: serde_json::Value,
    rng_state: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "MICK1";

/// Format-level view of a checkpoint: named float32 tensors plus opaque JSON.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub config: serde_json::Value,
    pub rng_state: serde_json::Value,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(ck.tensors.len());
    let mut offset = 0;
    for (name, t) in &ck.tensors {
        entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), dtype: "f32".into(), offset });
        offset += t.numel() * 4;
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        tensors: entries,
        config: ck.config.clone(),
        rng_state: ck.rng_state.clone(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(offset);
    for (_, t) in &ck.tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "checkpoint header is not newline-terminated"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::format(path, format!("unknown checkpoint format {:?}", header.format)));
    }
    let payload = &bytes[nl + 1..];
    let mut expected = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(Error::format(path, format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
        }
        if e.offset != expected {
            return Err(Error::format(
                path,
                format!("tensor {} offset {} inconsistent with layout (expected {})", e.name, e.offset, expected),
            ));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 4;
        if end > payload.len() {
            return Err(Error::format(path, format!("tensor {} runs past the payload", e.name)));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((e.name, Tensor::new(&e.shape, data)?));
        expected = end;
    }
    if expected != payload.len() {
        return Err(Error::format(path, format!("payload has {} trailing bytes", payload.len() - expected)));
    }
    Ok(Checkpoint { tensors, config: header.config, rng_state: header.rng_state })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_bytes(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One (scene, target device) pair. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub scene_id: String,
    pub device_id: u32,
    pub raw_path: String,
    pub rgb_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_path: Option<String>,
    pub split: Split,
    /// Ground-truth white balance of the target device for this scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wb_dg: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn validate(&self) -> Result<()> {
        use std::collections::{BTreeMap, BTreeSet};
        let mut per_scene: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
        for r in &self.records {
            if !per_scene.entry(&r.scene_id).or_default().insert(r.device_id) {
                return Err(invalid!("scene {} lists device {} twice", r.scene_id, r.device_id));
            }
        }
        Ok(())
    }

    /// Sorted distinct device ids.
    pub fn devices(&self) -> Vec<u32> {
        let mut d: Vec<u32> = self.records.iter().map(|r| r.device_id).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    /// Sorted distinct scene ids of a split.
    pub fn scenes(&self, split: Split) -> Vec<String> {
        let mut s: Vec<String> =
            self.records.iter().filter(|r| r.split == split).map(|r| r.scene_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn records_for(&self, scene: &str) -> Vec<&ManifestRecord> {
        let mut r: Vec<&ManifestRecord> = self.records.iter().filter(|r| r.scene_id == scene).collect();
        r.sort_by_key(|r| r.device_id);
        r
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest { root, records };
    m.validate()?;
    Ok(m)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut out = Vec::new();
    for r in &manifest.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    write_bytes(path, &out)
}
