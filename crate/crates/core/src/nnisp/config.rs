use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Toy,
}

/// Optional network features, one per ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Features {
    pub adapt_illuminants: bool,
    pub global_semantics: bool,
    pub attention: bool,
    pub iso_exp: bool,
}

impl Features {
    pub fn all() -> Self {
        Self { adapt_illuminants: true, global_semantics: true, attention: true, iso_exp: true }
    }

    pub fn none() -> Self {
        Self { adapt_illuminants: false, global_semantics: false, attention: false, iso_exp: false }
    }

    /// Cumulative ablation rows `A` (baseline) through `E` (everything).
    pub fn row(name: char) -> Option<Self> {
        let mut f = Self::none();
        match name.to_ascii_uppercase() {
            'A' => {}
            'B' => f.adapt_illuminants = true,
            'C' => (f.adapt_illuminants, f.global_semantics) = (true, true),
            'D' => (f.adapt_illuminants, f.global_semantics, f.attention) = (true, true, true),
            'E' => f = Self::all(),
            _ => return None,
        }
        Some(f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XcitConfig {
    pub patch: usize,
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub input_size: usize,
    /// Class-attention layers aggregating the patch tokens into CLS.
    pub class_layers: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub scale: Scale,
    pub levels: usize,
    pub widths: Vec<usize>,
    pub bottleneck_width: usize,
    pub embed_dim: usize,
    pub res_attn_blocks_per_level: usize,
    pub bottleneck_res_blocks: usize,
    pub attn_heads: usize,
    pub xcit: XcitConfig,
    pub num_devices: usize,
    pub features: Features,
    /// Device conditioning. Off gives the unconditional single-output
    /// baseline: no embedding table, learned decoder queries.
    #[serde(default = "yes")]
    pub conditioning: bool,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn full(num_devices: usize) -> Self {
        Self {
            scale: Scale::Full,
            levels: 3,
            widths: vec![64, 128, 256],
            bottleneck_width: 512,
            embed_dim: 128,
            res_attn_blocks_per_level: 1,
            bottleneck_res_blocks: 2,
            attn_heads: 4,
            xcit: XcitConfig { patch: 16, blocks: 4, dim: 128, heads: 4, input_size: 256, class_layers: 2, mlp_ratio: 4 },
            num_devices,
            features: Features::all(),
            conditioning: true,
            seed: 0,
        }
    }

    pub fn toy(num_devices: usize) -> Self {
        Self {
            scale: Scale::Toy,
            widths: vec![16, 32, 64],
            bottleneck_width: 128,
            xcit: XcitConfig { patch: 16, blocks: 2, dim: 32, heads: 4, input_size: 64, class_layers: 2, mlp_ratio: 4 },
            ..Self::full(num_devices)
        }
    }

    pub fn with_features(mut self, features: Features) -> Self {
        self.features = features;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.widths.len() != self.levels {
            return Err(invalid!("need one width per level: {} levels, widths {:?}", self.levels, self.widths));
        }
        if self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid!("widths must be strictly increasing: {:?}", self.widths));
        }
        if self.bottleneck_width % self.attn_heads != 0 {
            return Err(invalid!("bottleneck width {} not divisible by {} heads", self.bottleneck_width, self.attn_heads));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w % self.attn_heads != 0 || w % 4 != 0) {
            return Err(invalid!("width {} must be divisible by 4 and by {} heads", w, self.attn_heads));
        }
        if self.bottleneck_width % 4 != 0 {
            return Err(invalid!("bottleneck width must be divisible by 4"));
        }
        if self.res_attn_blocks_per_level == 0 {
            return Err(invalid!("need at least one residual block per level"));
        }
        let x = &self.xcit;
        if x.patch == 0 || x.input_size % x.patch != 0 {
            return Err(invalid!("xcit input size {} not divisible by patch {}", x.input_size, x.patch));
        }
        if x.heads == 0 || x.dim % x.heads != 0 || x.dim % 4 != 0 {
            return Err(invalid!("xcit dim {} must be divisible by 4 and by {} heads", x.dim, x.heads));
        }
        if self.num_devices == 0 {
            return Err(invalid!("need at least one device"));
        }
        if self.embed_dim == 0 {
            return Err(invalid!("embed_dim must be positive"));
        }
        Ok(())
    }

    /// Packed-input spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels + 1)
    }
}
