//! The device-conditioned RAW-to-sRGB network: wavelet encoder/decoder,
//! metadata branches, token attention and the cross-covariance
//! global-semantics branch.

mod config;
mod model;
mod specs;
mod state;
pub mod wavelet;

use metaisp_autograd::{Graph, Tensor};

pub use config::{Features, ModelConfig, Scale, XcitConfig};
pub use model::{
    attend, decoder_attention, depth_to_space, embed_device, encoder_attention, forward, global_semantics,
    illum_branch, iso_exp_branch, iso_exp_features, patch_positions, resize_bilinear, sinusoid_2d,
    update_running_stats, wb_branch, xca, AuxVars, Batch, InputVars, NormMode, Output, Pipeline, BN_MOMENTUM,
};
pub use specs::{buffer_specs, param_breakdown, param_count, param_specs, Init, ParamSpec};
pub use state::{NetworkState, Params};

use crate::error::{invalid, Result};
use crate::imageio::{pack_rggb, ColorSpace, Image, RawImage, RgbImage};

/// `weights . E` computed directly on the stored table.
pub fn embedding_for(state: &NetworkState, weights: &[f64]) -> Result<Vec<f32>> {
    let table = state.param("embed.table")?;
    let (k, d) = (table.shape()[0], table.shape()[1]);
    if weights.len() != k {
        return Err(invalid!("{} device weights for {} devices", weights.len(), k));
    }
    let mut g = Graph::<f32>::new();
    let p = state.bind(&mut g, false);
    let w = g.constant(Tensor::new(&[1, k], weights.iter().map(|&v| v as f32).collect())?);
    let e = embed_device(&mut g, &p, w)?;
    let out = g.value(e).data().to_vec();
    debug_assert_eq!(out.len(), d);
    Ok(out)
}

/// One-hot weight vector for `device` among `k`.
pub fn one_hot(device: usize, k: usize) -> Result<Vec<f64>> {
    if device >= k {
        return Err(invalid!("unknown device id {}; valid ids are 0..={}", device, k.saturating_sub(1)));
    }
    let mut w = vec![0.0; k];
    w[device] = 1.0;
    Ok(w)
}

/// Weights `(1 - t) * onehot(from) + t * onehot(to)`.
pub fn interpolate_weights(from: usize, to: usize, t: f64, k: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid!("interpolation position {} outside [0, 1]", t));
    }
    let (a, b) = (one_hot(from, k)?, one_hot(to, k)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (1.0 - t) * x + t * y).collect())
}

/// Result of whole-frame inference.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub image: RgbImage,
    pub wb_used: [f64; 4],
    pub alpha: Option<Vec<f32>>,
    pub g: Option<Vec<f32>>,
}

/// Edge-replicates a packed image up to multiples of `m`.
fn pad_to_multiple(img: &Image, m: usize) -> Image {
    let (h, w) = (img.height.div_ceil(m) * m, img.width.div_ceil(m) * m);
    if (h, w) == (img.height, img.width) {
        return img.clone();
    }
    let mut out = Image::zeros(w, h, img.channels);
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(y.min(img.height - 1), x.min(img.width - 1), c));
            }
        }
    }
    out
}

/// Packed planar `[1, 4, H, W]` tensor of an image.
pub fn image_tensor(img: &Image) -> Tensor<f32> {
    Tensor::new(&[1, img.channels, img.height, img.width], img.to_planar()).expect("image shape")
}

/// Full-frame inference on a RAW capture with device mixing weights.
pub fn infer(state: &NetworkState, raw: &RawImage, weights: &[f64], pipeline: Pipeline) -> Result<Prediction> {
    let cfg = &state.config;
    let k = if cfg.conditioning { state.num_embeddings() } else { cfg.num_devices };
    if weights.len() != k {
        return Err(invalid!("{} device weights for {} devices", weights.len(), k));
    }
    let packed = pack_rggb(raw)?;
    let (h, w) = (packed.height, packed.width);
    let padded = pad_to_multiple(&packed, cfg.size_multiple());
    let x4 = image_tensor(&padded);
    let x_full = if cfg.features.global_semantics {
        Some(resize_bilinear(&image_tensor(&packed), cfg.xcit.input_size, cfg.xcit.input_size)?)
    } else {
        None
    };
    let meta = &raw.meta;
    let ie = iso_exp_features(meta.iso, meta.exposure_s)?;
    let batch = Batch {
        x4,
        wb: Tensor::new(&[1, 4], meta.wb_gains.iter().map(|&v| v as f32).collect())?,
        iso_exp: Tensor::new(&[1, 2], vec![ie[0] as f32, ie[1] as f32])?,
        weights: Tensor::new(&[1, k], weights.iter().map(|&v| v as f32).collect())?,
        x_full,
        coords: vec![(0, 0)],
    };
    let mut g = Graph::<f32>::new();
    let p = state.bind(&mut g, false);
    let inputs = batch.place(&mut g);
    let out = forward(&mut g, state, &p, &inputs, pipeline, NormMode::Eval)?;
    let y = g.value(out.y);
    let full = Image::from_planar(2 * padded.width, 2 * padded.height, 3, y.data())?;
    let image = full.crop(0, 0, 2 * h, 2 * w)?;
    let wb = g.value(out.aux.wb_used).data();
    Ok(Prediction {
        image: RgbImage::new(image, ColorSpace::Srgb)?,
        wb_used: [wb[0] as f64, wb[1] as f64, wb[2] as f64, wb[3] as f64],
        alpha: out.aux.alpha.map(|a| g.value(a).data().to_vec()),
        g: out.aux.g.map(|v| g.value(v).data().to_vec()),
    })
}
