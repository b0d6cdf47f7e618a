use std::collections::{BTreeMap, HashMap};

use metaisp_autograd::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::specs::{buffer_specs, param_specs, Init, ParamSpec};
use crate::error::{invalid, Result};
use crate::imageio::Checkpoint;

/// Trainable parameters plus normalization running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub buffers: BTreeMap<String, Tensor<f32>>,
}

fn materialize(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = spec.numel();
    let data: Vec<f32> = match spec.init {
        Init::He(fan_in) => {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            (0..n).map(|_| normal.sample(rng) as f32).collect()
        }
        Init::Normal(std) => {
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(rng) as f32).collect()
        }
        Init::Const(v) => vec![v as f32; n],
        Init::Halves(a, b) => (0..n).map(|i| if i < n / 2 { a as f32 } else { b as f32 }).collect(),
    };
    Tensor::new(&spec.shape, data).expect("spec shape")
}

impl NetworkState {
    /// Fresh seeded initialization; parameters are drawn in spec order.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = param_specs(config).iter().map(|s| (s.name.clone(), materialize(s, &mut rng))).collect();
        let buffers = buffer_specs(config).iter().map(|s| (s.name.clone(), materialize(s, &mut rng))).collect();
        Ok(Self { config: config.clone(), params, buffers })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<f32>> {
        self.params.get(name).ok_or_else(|| invalid!("missing parameter {name}"))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(Tensor::is_finite)
    }

    /// Embedding table row count, 0 when conditioning is off.
    pub fn num_embeddings(&self) -> usize {
        self.params.get("embed.table").map_or(0, |t| t.shape()[0])
    }

    /// Places every parameter on the graph, trainable or constant.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Params {
        let mut map = HashMap::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let t = t.cast::<T>();
            let v = if trainable { g.param(t) } else { g.constant(t) };
            map.insert(name.clone(), v);
        }
        Params { map }
    }

    /// Checkpoint holding this state, extra tensors (e.g. optimizer
    /// moments) and extra header fields under `config`.
    pub fn to_checkpoint(
        &self,
        extra: Vec<(String, Tensor<f32>)>,
        mut config: serde_json::Map<String, serde_json::Value>,
        rng_state: serde_json::Value,
    ) -> Result<Checkpoint> {
        config.insert("model".into(), serde_json::to_value(&self.config)?);
        let mut tensors: Vec<(String, Tensor<f32>)> =
            self.params.iter().chain(self.buffers.iter()).map(|(k, v)| (k.clone(), v.clone())).collect();
        tensors.extend(extra);
        Ok(Checkpoint { tensors, config: serde_json::Value::Object(config), rng_state })
    }

    /// Inverse of [`NetworkState::to_checkpoint`]; tensors that are neither
    /// parameters nor buffers are returned separately.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, BTreeMap<String, Tensor<f32>>)> {
        let model = ck.config.get("model").ok_or_else(|| invalid!("checkpoint config has no model section"))?;
        let config: ModelConfig = serde_json::from_value(model.clone())?;
        config.validate()?;
        let mut all: BTreeMap<String, Tensor<f32>> = ck.tensors.iter().cloned().collect();
        let mut take = |specs: Vec<ParamSpec>| -> Result<BTreeMap<String, Tensor<f32>>> {
            let mut out = BTreeMap::new();
            for s in specs {
                let t = all.remove(&s.name).ok_or_else(|| invalid!("checkpoint lacks tensor {}", s.name))?;
                if t.shape() != s.shape.as_slice() {
                    return Err(invalid!("tensor {} has shape {:?}, config expects {:?}", s.name, t.shape(), s.shape));
                }
                out.insert(s.name, t);
            }
            Ok(out)
        };
        let params = take(param_specs(&config))?;
        let buffers = take(buffer_specs(&config))?;
        Ok((Self { config, params, buffers }, all))
    }
}

/// Graph handles of the bound parameters, by name.
#[derive(Clone, Debug, Default)]
pub struct Params {
    map: HashMap<String, Var>,
}

impl Params {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map.get(name).copied().ok_or_else(|| invalid!("missing parameter {name}"))
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.map.insert(name.into(), v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}
