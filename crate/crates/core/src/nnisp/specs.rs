//! Names, shapes and initializers of every network tensor. The forward pass
//! looks parameters up by these names.

use std::collections::BTreeMap;

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Fan-in scaled normal, std `sqrt(2 / fan_in)`.
    He(usize),
    Normal(f64),
    Const(f64),
    /// First half of the vector set to `.0`, second half to `.1`.
    Halves(f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Bias making `softplus(b) = target`.
pub(crate) fn softplus_inv(target: f64) -> f64 {
    (target.exp() - 1.0).ln()
}

pub(crate) const ILLUM_WIDTHS: [usize; 3] = [16, 32, 32];
pub(crate) const ILLUM_HIDDEN: usize = 64;
pub(crate) const ISO_LIFT: usize = 32;
pub(crate) const MOD_STD: f64 = 0.02;
const RESIDUAL_GAIN: f64 = 0.1;
const HEAD_STD: f64 = 1e-3;
const ISO_OUT_STD: f64 = 2e-3;

#[derive(Default)]
struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: impl Into<String>, shape: &[usize], init: Init) {
        self.0.push(ParamSpec { name: name.into(), shape: shape.to_vec(), init });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.push(format!("{name}.w"), &[cout, cin, k, k], Init::He(cin * k * k));
        self.push(format!("{name}.b"), &[cout], Init::Const(0.0));
    }

    /// Conv whose output feeds a residual sum; starts close to zero.
    fn residual_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let std = RESIDUAL_GAIN * (2.0 / (cin * k * k) as f64).sqrt();
        self.push(format!("{name}.w"), &[cout, cin, k, k], Init::Normal(std));
        self.push(format!("{name}.b"), &[cout], Init::Const(0.0));
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.push(format!("{name}.w"), &[din, dout], Init::He(din));
        self.push(format!("{name}.b"), &[dout], Init::Const(0.0));
    }

    /// Small-weight linear layer with constant bias, for heads whose output
    /// multiplies features and should start near a fixed value.
    fn modulator(&mut self, name: &str, din: usize, dout: usize, bias: f64) {
        self.push(format!("{name}.w"), &[din, dout], Init::Normal(MOD_STD));
        self.push(format!("{name}.b"), &[dout], Init::Const(bias));
    }

    fn layer_norm(&mut self, name: &str, dim: usize) {
        self.push(format!("{name}.w"), &[dim], Init::Const(1.0));
        self.push(format!("{name}.b"), &[dim], Init::Const(0.0));
    }

    fn attention(&mut self, name: &str, cfg: &ModelConfig, w: usize, decoder: bool) {
        if decoder && cfg.conditioning {
            self.linear(&format!("{name}.qproj"), cfg.embed_dim, w);
        } else {
            self.push(format!("{name}.q"), &[w], Init::Normal((w as f64).powf(-0.5)));
        }
        self.linear(&format!("{name}.k"), w, w);
        self.linear(&format!("{name}.v"), w, w);
        self.linear(&format!("{name}.mlp"), w, w);
    }

    fn rab(&mut self, name: &str, cfg: &ModelConfig, w: usize, decoder: bool) {
        self.conv(&format!("{name}.c1"), w, w, 3);
        self.residual_conv(&format!("{name}.c2"), w, w, 3);
        if cfg.features.attention {
            self.attention(&format!("{name}.attn"), cfg, w, decoder);
        }
    }

    fn mlp(&mut self, name: &str, dim: usize, ratio: usize) {
        self.linear(&format!("{name}.fc1"), dim, dim * ratio);
        self.linear(&format!("{name}.fc2"), dim * ratio, dim);
    }
}

pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Specs::default();
    let w = &cfg.widths;
    let f = cfg.features;
    if cfg.conditioning {
        s.push("embed.table", &[cfg.num_devices, cfg.embed_dim], Init::Normal(0.02));
    }
    if f.adapt_illuminants {
        s.modulator("wb.l0", 4, w[0], softplus_inv(1.0));
        if cfg.levels > 1 {
            s.modulator("wb.l1", w[0], w[1], softplus_inv(1.0));
        }
        let mut cin = 4;
        for (i, &c) in ILLUM_WIDTHS.iter().enumerate() {
            s.conv(&format!("illum.c{i}"), cin, c, 3);
            cin = c;
        }
        let ctx = if cfg.conditioning { cfg.embed_dim } else { 0 };
        s.linear("illum.fc1", cin + ctx, ILLUM_HIDDEN);
        s.modulator("illum.fc2", ILLUM_HIDDEN, 2, softplus_inv(2.0));
    }
    if f.iso_exp {
        s.linear("isoexp.iso", 1, ISO_LIFT);
        s.linear("isoexp.exp", 1, ISO_LIFT);
        s.linear("isoexp.mid", 2 * ISO_LIFT, 2 * ISO_LIFT);
        s.push("isoexp.out.w", &[2 * ISO_LIFT, 2 * w[0]], Init::Normal(ISO_OUT_STD));
        s.push("isoexp.out.b", &[2 * w[0]], Init::Halves(1.0, 0.0));
    }
    s.conv("enc0.in", 4, w[0], 3);
    for l in 0..cfg.levels {
        if l > 0 {
            s.conv(&format!("enc{l}.in"), 4 * w[l - 1], w[l], 1);
        }
        for r in 0..cfg.res_attn_blocks_per_level {
            s.rab(&format!("enc{l}.rab{r}"), cfg, w[l], false);
        }
    }
    let bw = cfg.bottleneck_width;
    s.conv("bott.in", 4 * w[cfg.levels - 1], bw, 1);
    for r in 0..cfg.bottleneck_res_blocks {
        s.conv(&format!("bott.rb{r}.c1"), bw, bw / 2, 1);
        s.residual_conv(&format!("bott.rb{r}.c2"), bw / 2, bw, 1);
    }
    if cfg.conditioning {
        s.modulator("bott.proj", cfg.embed_dim, bw, 1.0);
    }
    let mut up = bw;
    for l in (0..cfg.levels).rev() {
        s.conv(&format!("dec{l}.fuse"), up / 4 + w[l], w[l], 1);
        for r in 0..cfg.res_attn_blocks_per_level {
            s.rab(&format!("dec{l}.rab{r}"), cfg, w[l], true);
        }
        up = w[l];
    }
    s.push("head.w", &[12, w[0], 3, 3], Init::Normal(HEAD_STD));
    s.push("head.b", &[12], Init::Const(0.0));
    if f.global_semantics {
        let x = &cfg.xcit;
        let d = x.dim;
        s.conv("gs.embed", 4, d, x.patch);
        s.push("gs.cls", &[d], Init::Normal(0.02));
        for b in 0..x.blocks {
            let n = format!("gs.blk{b}");
            s.layer_norm(&format!("{n}.norm1"), d);
            s.linear(&format!("{n}.qkv"), d, 3 * d);
            s.push(format!("{n}.temp"), &[x.heads], Init::Const(1.0));
            s.linear(&format!("{n}.proj"), d, d);
            s.push(format!("{n}.gamma1"), &[d], Init::Const(1.0));
            s.layer_norm(&format!("{n}.norm3"), d);
            s.conv(&format!("{n}.lpi1"), 1, d, 3);
            s.layer_norm(&format!("{n}.bn"), d);
            s.conv(&format!("{n}.lpi2"), 1, d, 3);
            s.push(format!("{n}.gamma3"), &[d], Init::Const(1.0));
            s.layer_norm(&format!("{n}.norm2"), d);
            s.mlp(&format!("{n}.mlp"), d, x.mlp_ratio);
            s.push(format!("{n}.gamma2"), &[d], Init::Const(1.0));
        }
        for c in 0..x.class_layers {
            let n = format!("gs.ca{c}");
            s.layer_norm(&format!("{n}.norm1"), d);
            s.linear(&format!("{n}.q"), d, d);
            s.linear(&format!("{n}.k"), d, d);
            s.linear(&format!("{n}.v"), d, d);
            s.linear(&format!("{n}.proj"), d, d);
            s.push(format!("{n}.gamma1"), &[d], Init::Const(1.0));
            s.layer_norm(&format!("{n}.norm2"), d);
            s.mlp(&format!("{n}.mlp"), d, x.mlp_ratio);
            s.push(format!("{n}.gamma2"), &[d], Init::Const(1.0));
        }
        s.layer_norm("gs.norm", d);
        s.modulator("gs.head", d, bw, 1.0);
    }
    s.0
}

/// Non-trainable running statistics of the global-semantics batch norms.
pub fn buffer_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Specs::default();
    if cfg.features.global_semantics {
        for b in 0..cfg.xcit.blocks {
            s.push(format!("gs.blk{b}.bn.running_mean"), &[cfg.xcit.dim], Init::Const(0.0));
            s.push(format!("gs.blk{b}.bn.running_var"), &[cfg.xcit.dim], Init::Const(1.0));
        }
    }
    s.0
}

/// Exact number of trainable scalars.
pub fn param_count(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Parameter count per top-level module (`embed`, `wb`, `enc0`, `gs`, ...).
pub fn param_breakdown(cfg: &ModelConfig) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in param_specs(cfg) {
        let key = s.name.split('.').next().unwrap_or("").to_string();
        *out.entry(key).or_insert(0) += s.numel();
    }
    out
}
