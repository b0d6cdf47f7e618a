//! Forward pass. Every function records onto a [`Graph`] so the same code
//! serves inference (constant parameters), training and gradient checks.

use metaisp_autograd::{BatchStats, Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::state::{NetworkState, Params};
use super::wavelet::{dwt_haar, idwt_haar};
use crate::error::{invalid, Result};

const LN_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Where the white balance applied to the input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// Gains from the RAW metadata.
    MetaWb,
    /// Gains estimated by the illumination branch.
    LearnedWb,
}

/// Behaviour of the global-semantics batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics, no update.
    Eval,
    /// Running statistics, no update, while the rest of the model trains.
    Frozen,
}

/// Graph handles of the network inputs for a batch of `B` patches.
#[derive(Clone, Debug)]
pub struct InputVars {
    /// Normalized packed RAW `[B, 4, H, W]`, before white balance.
    pub x4: Var,
    /// Metadata white-balance gains `[B, 4]`.
    pub wb: Var,
    /// `[B, 2]`: `log2(iso / 100)`, `log2(exposure_s * 1000)`.
    pub iso_exp: Var,
    /// Device mixing weights `[B, K]`.
    pub weights: Var,
    /// Full frame resized to the global-semantics input size `[B, 4, S, S]`.
    pub x_full: Option<Var>,
    /// Top-left corner of each patch in packed full-frame coordinates.
    pub coords: Vec<(usize, usize)>,
}

/// Plain-tensor batch, placed on a graph with [`Batch::place`].
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x4: Tensor<T>,
    pub wb: Tensor<T>,
    pub iso_exp: Tensor<T>,
    pub weights: Tensor<T>,
    pub x_full: Option<Tensor<T>>,
    pub coords: Vec<(usize, usize)>,
}

impl<T: Real> Batch<T> {
    pub fn place(&self, g: &mut Graph<T>) -> InputVars {
        InputVars {
            x4: g.constant(self.x4.clone()),
            wb: g.constant(self.wb.clone()),
            iso_exp: g.constant(self.iso_exp.clone()),
            weights: g.constant(self.weights.clone()),
            x_full: self.x_full.as_ref().map(|t| g.constant(t.clone())),
            coords: self.coords.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.x4.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Normalized metadata scalars fed to the ISO/exposure branch.
pub fn iso_exp_features(iso: f64, exposure_s: f64) -> Result<[f64; 2]> {
    if !(iso > 0.0 && exposure_s > 0.0) {
        return Err(invalid!("iso and exposure must be positive, got {} and {}", iso, exposure_s));
    }
    Ok([(iso / 100.0).log2(), (exposure_s * 1000.0).log2()])
}

/// Auxiliary forward outputs.
#[derive(Clone, Debug)]
pub struct AuxVars {
    pub wb_used: Var,
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
    pub g: Option<Var>,
    pub e: Option<Var>,
}

pub struct Output<T> {
    /// `[B, 3, 2H, 2W]` in `[0, 1]`.
    pub y: Var,
    pub aux: AuxVars,
    /// Batch statistics of train-mode normalizations, by buffer prefix.
    pub norm_stats: Vec<(String, BatchStats<T>)>,
}

// ---------------------------------------------------------------------------
// small building blocks

fn conv<T: Real>(g: &mut Graph<T>, p: &Params, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(b), stride, pad)?)
}

fn dwconv<T: Real>(g: &mut Graph<T>, p: &Params, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(g.depthwise_conv2d(x, w, Some(b), 1)?)
}

fn linear<T: Real>(g: &mut Graph<T>, p: &Params, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    Ok(g.linear(x, w, Some(b))?)
}

fn layer_norm_affine<T: Real>(g: &mut Graph<T>, p: &Params, name: &str, x: Var) -> Result<Var> {
    let y = g.layer_norm(x, LN_EPS);
    let y = g.mul(y, p.get(&format!("{name}.w"))?)?;
    Ok(g.add(y, p.get(&format!("{name}.b"))?)?)
}

/// `[B, C, H, W]` to `[B, HW, C]`.
fn to_tokens<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[0, 2, 3, 1])?;
    Ok(g.reshape(t, &[s[0], s[2] * s[3], s[1]])?)
}

fn from_tokens<T: Real>(g: &mut Graph<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(t).to_vec();
    let x = g.reshape(t, &[s[0], h, w, s[2]])?;
    Ok(g.permute(x, &[0, 3, 1, 2])?)
}

/// Per-sample channel vector `[B, C]` to a broadcastable `[B, C, 1, 1]`.
fn per_channel<T: Real>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let s = g.shape(v).to_vec();
    Ok(g.reshape(v, &[s[0], s[1], 1, 1])?)
}

/// Repeats a `[C]` parameter into `[B, C]`.
fn tile_batch<T: Real>(g: &mut Graph<T>, v: Var, batch: usize) -> Result<Var> {
    let c = g.shape(v)[0];
    let r = g.reshape(v, &[1, c])?;
    let ones = g.constant(Tensor::ones(&[batch, 1]));
    Ok(g.mul(ones, r)?)
}

/// Fixed 2D sinusoidal encoding: the first half of the channels encodes the
/// row coordinate, the second half the column, as interleaved sin/cos pairs.
pub fn sinusoid_2d(y: f64, x: f64, channels: usize) -> Vec<f64> {
    let half = channels / 2;
    let mut out = Vec::with_capacity(channels);
    for pos in [y, x] {
        for k in 0..half {
            let freq = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
            out.push(if k % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() });
        }
    }
    out
}

/// Encoding of each token of an `h x w` feature map whose pixels sit
/// `stride` packed pixels apart starting at each sample's patch corner.
pub fn patch_positions<T: Real>(coords: &[(usize, usize)], stride: usize, h: usize, w: usize, channels: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(coords.len() * h * w * channels);
    for &(y0, x0) in coords {
        for i in 0..h {
            for j in 0..w {
                let pe = sinusoid_2d((y0 + i * stride) as f64, (x0 + j * stride) as f64, channels);
                data.extend(pe.into_iter().map(T::lit));
            }
        }
    }
    Tensor::new(&[coords.len(), h * w, channels], data).expect("position shape")
}

// ---------------------------------------------------------------------------
// conditioning and metadata branches

/// `e = weights . E`, for `weights` of shape `[B, K]`.
pub fn embed_device<T: Real>(g: &mut Graph<T>, p: &Params, weights: Var) -> Result<Var> {
    let table = p.get("embed.table")?;
    let k = g.shape(table)[0];
    let ws = g.shape(weights).to_vec();
    if ws.len() != 2 || ws[1] != k {
        return Err(invalid!("device weights {:?} do not match {} embedding rows", ws, k));
    }
    Ok(g.matmul(weights, table)?)
}

/// Per-level channel scales from the white-balance gains `[B, 4]`; `None`
/// when the feature is off (identity injection).
pub fn wb_branch<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Params, wb: Var) -> Result<Option<(Var, Option<Var>)>> {
    if !cfg.features.adapt_illuminants {
        return Ok(None);
    }
    let s0 = linear(g, p, "wb.l0", wb)?;
    let s0 = g.softplus(s0);
    let s1 = if cfg.levels > 1 {
        let s1 = linear(g, p, "wb.l1", s0)?;
        Some(g.softplus(s1))
    } else {
        None
    };
    Ok(Some((s0, s1)))
}

/// Estimated white balance `[B, 4]` as `[r, 1, 1, b]`.
pub fn illum_branch<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Params, x4: Var, e: Option<Var>) -> Result<Var> {
    if !cfg.features.adapt_illuminants {
        return Err(invalid!("the learned-wb pipeline needs the adapt_illuminants feature"));
    }
    let mut h = x4;
    for i in 0..super::specs::ILLUM_WIDTHS.len() {
        h = conv(g, p, &format!("illum.c{i}"), h, 2, 1)?;
        h = g.relu(h);
    }
    let pooled = g.mean_axes(h, &[2, 3])?;
    let s = g.shape(pooled).to_vec();
    let mut feat = g.reshape(pooled, &[s[0], s[1]])?;
    if cfg.conditioning {
        let e = e.ok_or_else(|| invalid!("conditioned illumination branch needs an embedding"))?;
        feat = g.concat(&[feat, e], 1)?;
    }
    let h = linear(g, p, "illum.fc1", feat)?;
    let h = g.relu(h);
    let rb = linear(g, p, "illum.fc2", h)?;
    let rb = g.softplus(rb);
    let r = g.slice(rb, 1, 0, 1)?;
    let b = g.slice(rb, 1, 1, 1)?;
    let ones = g.constant(Tensor::ones(&[s[0], 1]));
    Ok(g.concat(&[r, ones, ones, b], 1)?)
}

/// `(alpha, beta)`, each `[B, widths[0]]`, from `[B, 2]` normalized metadata.
pub fn iso_exp_branch<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, p: &Params, iso_exp: Var) -> Result<Option<(Var, Var)>> {
    if !cfg.features.iso_exp {
        return Ok(None);
    }
    let iso = g.slice(iso_exp, 1, 0, 1)?;
    let exp = g.slice(iso_exp, 1, 1, 1)?;
    let a = linear(g, p, "isoexp.iso", iso)?;
    let a = g.relu(a);
    let b = linear(g, p, "isoexp.exp", exp)?;
    let b = g.relu(b);
    let h = g.concat(&[a, b], 1)?;
    let h = linear(g, p, "isoexp.mid", h)?;
    let h = g.relu(h);
    let out = linear(g, p, "isoexp.out", h)?;
    let w0 = cfg.widths[0];
    let alpha = g.slice(out, 1, 0, w0)?;
    let beta = g.slice(out, 1, w0, w0)?;
    Ok(Some((alpha, beta)))
}

// ---------------------------------------------------------------------------
// attention

/// Shared attention mechanics on tokens `f` `[B, N, C]` with query `q`
/// `[B, C]`: keys and values from the layer-normalized tokens plus the
/// positional encoding, per-head softmax over tokens, the summary scales the
/// tokens residually, then a residual FC + LayerNorm + GELU tail.
pub fn attend<T: Real>(g: &mut Graph<T>, p: &Params, name: &str, f: Var, q: Var, pe: Option<Var>, heads: usize) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    if g.shape(q) != [b, c] {
        return Err(invalid!("query {:?} does not match tokens {:?}", g.shape(q), s));
    }
    if heads == 0 || c % heads != 0 {
        return Err(invalid!("dim {} not divisible by {} heads", c, heads));
    }
    let d = c / heads;
    let mut inp = g.layer_norm(f, LN_EPS);
    if let Some(pe) = pe {
        inp = g.add(inp, pe)?;
    }
    let split = |g: &mut Graph<T>, t: Var| -> Result<Var> {
        let t = g.reshape(t, &[b, n, heads, d])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        Ok(g.reshape(t, &[b * heads, n, d])?)
    };
    let k = linear(g, p, &format!("{name}.k"), inp)?;
    let v = linear(g, p, &format!("{name}.v"), inp)?;
    let kh = split(g, k)?;
    let vh = split(g, v)?;
    let qh = g.reshape(q, &[b * heads, 1, d])?;
    let logits = g.matmul_t(qh, kh, false, true)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(logits);
    let summary = g.matmul(attn, vh)?;
    let summary = g.reshape(summary, &[b, 1, c])?;
    let scaled = g.mul(f, summary)?;
    let f1 = g.add(f, scaled)?;
    let t = linear(g, p, &format!("{name}.mlp"), f1)?;
    let t = g.layer_norm(t, LN_EPS);
    let t = g.gelu(t);
    Ok(g.add(f1, t)?)
}

/// Encoder attention with the learned query `{name}.q`.
pub fn encoder_attention<T: Real>(g: &mut Graph<T>, p: &Params, name: &str, f: Var, pe: Option<Var>, heads: usize) -> Result<Var> {
    let batch = g.shape(f)[0];
    let q = p.get(&format!("{name}.q"))?;
    let q = tile_batch(g, q, batch)?;
    attend(g, p, name, f, q, pe, heads)
}

/// Decoder attention whose query is a projection of the style embedding
/// (learned query when conditioning is off).
pub fn decoder_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Params,
    name: &str,
    f: Var,
    e: Option<Var>,
    pe: Option<Var>,
    heads: usize,
) -> Result<Var> {
    match e {
        Some(e) => {
            let q = linear(g, p, &format!("{name}.qproj"), e)?;
            attend(g, p, name, f, q, pe, heads)
        }
        None => encoder_attention(g, p, name, f, pe, heads),
    }
}

enum Query {
    Encoder,
    Decoder(Option<Var>),
}

/// Residual block `x + A(conv(gelu(conv(x))))` where `A` is the attention
/// (identity when the feature is off).
#[allow(clippy::too_many_arguments)]
fn res_attn_block<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Params,
    name: &str,
    x: Var,
    query: &Query,
    coords: &[(usize, usize)],
    stride: usize,
) -> Result<Var> {
    let h = conv(g, p, &format!("{name}.c1"), x, 1, 1)?;
    let h = g.gelu(h);
    let mut h = conv(g, p, &format!("{name}.c2"), h, 1, 1)?;
    if cfg.features.attention {
        let s = g.shape(h).to_vec();
        let tokens = to_tokens(g, h)?;
        let pe = g.constant(patch_positions(coords, stride, s[2], s[3], s[1]));
        let an = format!("{name}.attn");
        let t = match query {
            Query::Encoder => encoder_attention(g, p, &an, tokens, Some(pe), cfg.attn_heads)?,
            Query::Decoder(e) => decoder_attention(g, p, &an, tokens, *e, Some(pe), cfg.attn_heads)?,
        };
        h = from_tokens(g, t, s[2], s[3])?;
    }
    Ok(g.add(x, h)?)
}

// ---------------------------------------------------------------------------
// global semantics

/// Bilinear resize of `[B, C, H, W]` with half-pixel centers.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || s[2] == 0 || s[3] == 0 || out_h == 0 || out_w == 0 {
        return Err(invalid!("cannot resize {:?} to {}x{}", s, out_h, out_w));
    }
    let (h, w) = (s[2], s[3]);
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|o| coord(o, out_h, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| coord(o, out_w, w)).collect();
    let d = x.data();
    let mut out = Vec::with_capacity(s[0] * s[1] * out_h * out_w);
    for plane in d.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| plane[y * w + x].to_f64().unwrap();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::lit(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Ok(Tensor::new(&[s[0], s[1], out_h, out_w], out)?)
}

/// Cross-covariance attention on tokens `[B, T, D]`: per head, queries and
/// keys are L2-normalized along the token axis and attention is a softmax
/// over channels scaled by the learned temperature.
pub fn xca<T: Real>(g: &mut Graph<T>, p: &Params, name: &str, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, dim) = (s[0], s[1], s[2]);
    if dim % heads != 0 {
        return Err(invalid!("dim {} not divisible by {} heads", dim, heads));
    }
    let d = dim / heads;
    let qkv = linear(g, p, &format!("{name}.qkv"), x)?;
    let chan_major = |g: &mut Graph<T>, part: usize| -> Result<Var> {
        let v = g.slice(qkv, 2, part * dim, dim)?;
        let v = g.reshape(v, &[b, t, heads, d])?;
        let v = g.permute(v, &[0, 2, 3, 1])?;
        Ok(g.reshape(v, &[b * heads, d, t])?)
    };
    let q = chan_major(g, 0)?;
    let k = chan_major(g, 1)?;
    let v = chan_major(g, 2)?;
    let q = g.l2_normalize(q, 1e-12);
    let k = g.l2_normalize(k, 1e-12);
    let logits = g.matmul_t(q, k, false, true)?;
    let logits = g.reshape(logits, &[b, heads, d, d])?;
    let temp = p.get(&format!("{name}.temp"))?;
    let temp = g.reshape(temp, &[1, heads, 1, 1])?;
    let logits = g.mul(logits, temp)?;
    let logits = g.reshape(logits, &[b * heads, d, d])?;
    let attn = g.softmax(logits);
    let out = g.matmul(attn, v)?;
    let out = g.reshape(out, &[b, heads, d, t])?;
    let out = g.permute(out, &[0, 3, 1, 2])?;
    let out = g.reshape(out, &[b, t, dim])?;
    linear(g, p, &format!("{name}.proj"), out)
}

fn mlp<T: Real>(g: &mut Graph<T>, p: &Params, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{name}.fc2"), h)
}

fn residual_scaled<T: Real>(g: &mut Graph<T>, p: &Params, gamma: &str, x: Var, update: Var) -> Result<Var> {
    let u = g.mul(update, p.get(gamma)?)?;
    Ok(g.add(x, u)?)
}

/// Batch normalization over channel axis 1 of `[B, C, H, W]` with affine
/// `{name}.w/b` and running statistics `{name}.running_*`.
fn batch_norm_2d<T: Real>(
    g: &mut Graph<T>,
    p: &Params,
    state: &NetworkState,
    name: &str,
    x: Var,
    mode: NormMode,
    stats: &mut Vec<(String, BatchStats<T>)>,
) -> Result<Var> {
    let c = g.shape(x)[1];
    let normed = match mode {
        NormMode::Train => {
            let (y, st) = g.batch_norm(x, 1, BN_EPS)?;
            stats.push((name.to_string(), st));
            y
        }
        NormMode::Eval | NormMode::Frozen => {
            let rm = state.buffers.get(&format!("{name}.running_mean")).ok_or_else(|| invalid!("missing {name}.running_mean"))?;
            let rv = state.buffers.get(&format!("{name}.running_var")).ok_or_else(|| invalid!("missing {name}.running_var"))?;
            let shift: Vec<T> = rm.data().iter().map(|&m| T::lit(-(m as f64))).collect();
            let scale: Vec<T> = rv.data().iter().map(|&v| T::lit(1.0 / (v as f64 + BN_EPS).sqrt())).collect();
            let shift = g.constant(Tensor::new(&[1, c, 1, 1], shift)?);
            let scale = g.constant(Tensor::new(&[1, c, 1, 1], scale)?);
            let y = g.add(x, shift)?;
            g.mul(y, scale)?
        }
    };
    let w = p.get(&format!("{name}.w"))?;
    let w = g.reshape(w, &[1, c, 1, 1])?;
    let b = p.get(&format!("{name}.b"))?;
    let b = g.reshape(b, &[1, c, 1, 1])?;
    let y = g.mul(normed, w)?;
    Ok(g.add(y, b)?)
}

/// Local patch interaction on the patch tokens (the CLS token is untouched).
#[allow(clippy::too_many_arguments)]
fn lpi<T: Real>(
    g: &mut Graph<T>,
    p: &Params,
    state: &NetworkState,
    name: &str,
    x: Var,
    grid: usize,
    mode: NormMode,
    stats: &mut Vec<(String, BatchStats<T>)>,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, dim) = (s[0], s[1], s[2]);
    let patches = g.slice(x, 1, 1, t - 1)?;
    let img = from_tokens(g, patches, grid, grid)?;
    let h = dwconv(g, p, &format!("{name}.lpi1"), img)?;
    let h = g.gelu(h);
    let h = batch_norm_2d(g, p, state, &format!("{name}.bn"), h, mode, stats)?;
    let h = dwconv(g, p, &format!("{name}.lpi2"), h)?;
    let h = to_tokens(g, h)?;
    let zero = g.constant(Tensor::zeros(&[b, 1, dim]));
    Ok(g.concat(&[zero, h], 1)?)
}

fn class_attention<T: Real>(g: &mut Graph<T>, p: &Params, name: &str, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, dim) = (s[0], s[1], s[2]);
    let d = dim / heads;
    let u = layer_norm_affine(g, p, &format!("{name}.norm1"), x)?;
    let u_cls = g.slice(u, 1, 0, 1)?;
    let q = linear(g, p, &format!("{name}.q"), u_cls)?;
    let k = linear(g, p, &format!("{name}.k"), u)?;
    let v = linear(g, p, &format!("{name}.v"), u)?;
    let split = |g: &mut Graph<T>, v: Var, n: usize| -> Result<Var> {
        let v = g.reshape(v, &[b, n, heads, d])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        Ok(g.reshape(v, &[b * heads, n, d])?)
    };
    let qh = split(g, q, 1)?;
    let kh = split(g, k, t)?;
    let vh = split(g, v, t)?;
    let logits = g.matmul_t(qh, kh, false, true)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(logits);
    let o = g.matmul(attn, vh)?;
    let o = g.reshape(o, &[b, 1, dim])?;
    let o = linear(g, p, &format!("{name}.proj"), o)?;
    let cls = g.slice(x, 1, 0, 1)?;
    let cls = residual_scaled(g, p, &format!("{name}.gamma1"), cls, o)?;
    let h = layer_norm_affine(g, p, &format!("{name}.norm2"), cls)?;
    let h = mlp(g, p, &format!("{name}.mlp"), h)?;
    let cls = residual_scaled(g, p, &format!("{name}.gamma2"), cls, h)?;
    let rest = g.slice(x, 1, 1, t - 1)?;
    Ok(g.concat(&[cls, rest], 1)?)
}

/// Global-semantics vector `[B, bottleneck_width]` from the resized full
/// frame `[B, 4, S, S]`.
pub fn global_semantics<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Params,
    state: &NetworkState,
    x_full: Var,
    mode: NormMode,
    stats: &mut Vec<(String, BatchStats<T>)>,
) -> Result<Var> {
    let xc = &cfg.xcit;
    let s = g.shape(x_full).to_vec();
    if s.len() != 4 || s[1] != 4 || s[2] != xc.input_size || s[3] != xc.input_size {
        return Err(invalid!("global semantics expects [B, 4, {0}, {0}], got {1:?}", xc.input_size, s));
    }
    let b = s[0];
    let grid = xc.input_size / xc.patch;
    let emb = conv(g, p, "gs.embed", x_full, xc.patch, 0)?;
    let tokens = to_tokens(g, emb)?;
    let mut pos = Vec::with_capacity(grid * grid * xc.dim);
    for i in 0..grid {
        for j in 0..grid {
            pos.extend(sinusoid_2d(i as f64, j as f64, xc.dim).into_iter().map(T::lit));
        }
    }
    let pos = g.constant(Tensor::new(&[1, grid * grid, xc.dim], pos)?);
    let tokens = g.add(tokens, pos)?;
    let cls = p.get("gs.cls")?;
    let cls = tile_batch(g, cls, b)?;
    let cls = g.reshape(cls, &[b, 1, xc.dim])?;
    let mut x = g.concat(&[cls, tokens], 1)?;
    for blk in 0..xc.blocks {
        let n = format!("gs.blk{blk}");
        let u = layer_norm_affine(g, p, &format!("{n}.norm1"), x)?;
        let a = xca(g, p, &n, u, xc.heads)?;
        x = residual_scaled(g, p, &format!("{n}.gamma1"), x, a)?;
        let u = layer_norm_affine(g, p, &format!("{n}.norm3"), x)?;
        let l = lpi(g, p, state, &n, u, grid, mode, stats)?;
        x = residual_scaled(g, p, &format!("{n}.gamma3"), x, l)?;
        let u = layer_norm_affine(g, p, &format!("{n}.norm2"), x)?;
        let m = mlp(g, p, &format!("{n}.mlp"), u)?;
        x = residual_scaled(g, p, &format!("{n}.gamma2"), x, m)?;
    }
    for c in 0..xc.class_layers {
        x = class_attention(g, p, &format!("gs.ca{c}"), x, xc.heads)?;
    }
    let cls = g.slice(x, 1, 0, 1)?;
    let cls = g.reshape(cls, &[b, xc.dim])?;
    let cls = layer_norm_affine(g, p, "gs.norm", cls)?;
    linear(g, p, "gs.head", cls)
}

// ---------------------------------------------------------------------------
// full network

/// Rearranges `[B, 4C, H, W]` into `[B, C, 2H, 2W]`.
pub fn depth_to_space<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let c = s[1] / 4;
    let t = g.reshape(x, &[s[0], c, 2, 2, s[2], s[3]])?;
    let t = g.permute(t, &[0, 1, 4, 2, 5, 3])?;
    Ok(g.reshape(t, &[s[0], c, 2 * s[2], 2 * s[3]])?)
}

pub fn forward<T: Real>(
    g: &mut Graph<T>,
    state: &NetworkState,
    p: &Params,
    inp: &InputVars,
    pipeline: Pipeline,
    mode: NormMode,
) -> Result<Output<T>> {
    let cfg = &state.config;
    let xs = g.shape(inp.x4).to_vec();
    let m = cfg.size_multiple();
    if xs.len() != 4 || xs[1] != 4 || xs[2] % m != 0 || xs[3] % m != 0 || xs[2] == 0 || xs[3] == 0 {
        return Err(invalid!("input must be [B, 4, H, W] with H, W multiples of {}, got {:?}", m, xs));
    }
    let b = xs[0];
    if inp.coords.len() != b {
        return Err(invalid!("{} patch coordinates for a batch of {}", inp.coords.len(), b));
    }
    let mut stats = Vec::new();
    let e = if cfg.conditioning { Some(embed_device(g, p, inp.weights)?) } else { None };
    let wb_used = match pipeline {
        Pipeline::MetaWb => inp.wb,
        Pipeline::LearnedWb => illum_branch(g, cfg, p, inp.x4, e)?,
    };
    let wb4 = per_channel(g, wb_used)?;
    let x = g.mul(inp.x4, wb4)?;
    let mut f = conv(g, p, "enc0.in", x, 1, 1)?;
    let scales = wb_branch(g, cfg, p, wb_used)?;
    if let Some((s0, _)) = scales {
        let s0 = per_channel(g, s0)?;
        f = g.mul(f, s0)?;
    }
    let affine = iso_exp_branch(g, cfg, p, inp.iso_exp)?;
    if let Some((alpha, beta)) = affine {
        let a = per_channel(g, alpha)?;
        let bt = per_channel(g, beta)?;
        f = g.mul(f, a)?;
        f = g.add(f, bt)?;
    }
    let mut skips = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        if l > 0 {
            f = dwt_haar(g, f)?;
            f = conv(g, p, &format!("enc{l}.in"), f, 1, 0)?;
            if l == 1 {
                if let Some((_, Some(s1))) = scales {
                    let s1 = per_channel(g, s1)?;
                    f = g.mul(f, s1)?;
                }
            }
        }
        for r in 0..cfg.res_attn_blocks_per_level {
            f = res_attn_block(g, cfg, p, &format!("enc{l}.rab{r}"), f, &Query::Encoder, &inp.coords, 1 << l)?;
        }
        skips.push(f);
    }
    f = dwt_haar(g, f)?;
    f = conv(g, p, "bott.in", f, 1, 0)?;
    for r in 0..cfg.bottleneck_res_blocks {
        let h = conv(g, p, &format!("bott.rb{r}.c1"), f, 1, 0)?;
        let h = g.gelu(h);
        let h = conv(g, p, &format!("bott.rb{r}.c2"), h, 1, 0)?;
        f = g.add(f, h)?;
    }
    if let Some(e) = e {
        let pe = linear(g, p, "bott.proj", e)?;
        let pe = per_channel(g, pe)?;
        f = g.mul(f, pe)?;
    }
    let gvec = if cfg.features.global_semantics {
        let xf = inp.x_full.ok_or_else(|| invalid!("global semantics needs the full-frame input"))?;
        let gv = global_semantics(g, cfg, p, state, xf, mode, &mut stats)?;
        let gc = per_channel(g, gv)?;
        f = g.mul(f, gc)?;
        Some(gv)
    } else {
        None
    };
    for l in (0..cfg.levels).rev() {
        f = idwt_haar(g, f)?;
        f = g.concat(&[f, skips[l]], 1)?;
        f = conv(g, p, &format!("dec{l}.fuse"), f, 1, 0)?;
        for r in 0..cfg.res_attn_blocks_per_level {
            f = res_attn_block(g, cfg, p, &format!("dec{l}.rab{r}"), f, &Query::Decoder(e), &inp.coords, 1 << l)?;
        }
    }
    let h = conv(g, p, "head", f, 1, 1)?;
    let h = depth_to_space(g, h)?;
    let y = g.sigmoid(h);
    let (alpha, beta) = affine.map_or((None, None), |(a, b)| (Some(a), Some(b)));
    Ok(Output { y, aux: AuxVars { wb_used, alpha, beta, g: gvec, e }, norm_stats: stats })
}

/// Blends train-mode batch statistics into the running buffers.
pub fn update_running_stats<T: Real>(state: &mut NetworkState, stats: &[(String, BatchStats<T>)]) -> Result<()> {
    for (name, st) in stats {
        for (key, vals) in [("running_mean", &st.mean), ("running_var", &st.var_unbiased)] {
            let buf = state
                .buffers
                .get_mut(&format!("{name}.{key}"))
                .ok_or_else(|| invalid!("missing buffer {name}.{key}"))?;
            for (r, v) in buf.data_mut().iter_mut().zip(vals.iter()) {
                *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * v.to_f64().unwrap()) as f32;
            }
        }
    }
    Ok(())
}
