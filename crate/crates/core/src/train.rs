//! Optimization loop, learning-rate schedule, pretrain/finetune protocol,
//! evaluation and per-block gradient verification.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use metaisp_autograd::check::{check_gradients, GradReport, DEFAULT_STEP};
use metaisp_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{collate, sample_batch, Dataset, FlowMode, LoadConfig, TrainBatch};
use crate::error::{invalid, Error, Result};
use crate::imageio::{save_checkpoint, Checkpoint, Image, Manifest, Split};
use crate::losses::{total_loss, total_loss_wb, FeatureStack, LossWeights, MetricAccumulator, MetricReport, DEFAULT_FEATURE_SEED};
use crate::nnisp::{
    decoder_attention, encoder_attention, forward, global_semantics, illum_branch, infer, iso_exp_branch, one_hot,
    patch_positions, update_running_stats, wb_branch, wavelet, xca, Features, ModelConfig, NetworkState, NormMode, Params,
    Pipeline,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub pipeline: Pipeline,
    pub freeze_norm_stats: bool,
    /// Save a checkpoint every this many epochs; 0 keeps only the last one.
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    /// Training patch side in output pixels.
    pub patch_size: usize,
    pub flow_mode: FlowMode,
    /// Optimizer steps per epoch; defaults to one pass over the patches.
    pub steps_per_epoch: Option<usize>,
    /// Compute validation metrics after every epoch.
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            seed: 0,
            pipeline: Pipeline::MetaWb,
            freeze_norm_stats: false,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            patch_size: 64,
            flow_mode: FlowMode::Recorded,
            steps_per_epoch: None,
            validate: true,
        }
    }
}

impl TrainConfig {
    /// Full-scale protocol: 100 epochs on 448 px patches.
    pub fn full() -> Self {
        Self { epochs: 100, patch_size: 448, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", self.lr));
        }
        if self.epochs < 2 {
            return Err(invalid!("need at least 2 epochs so the decay phase exists, got {}", self.epochs));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(invalid!("adam needs betas in [0, 1) and a positive epsilon"));
        }
        if self.patch_size == 0 || self.patch_size % 2 != 0 {
            return Err(invalid!("patch size must be positive and even, got {}", self.patch_size));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(invalid!("steps per epoch must be positive"));
        }
        self.loss.validate()
    }
}

/// Constant for the first half of training, then linear decay reaching 0
/// at the final epoch boundary.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.epochs as f64;
    let half = total / 2.0;
    let e = epoch as f64;
    if e >= total {
        0.0
    } else if e < half {
        cfg.lr
    } else {
        cfg.lr * (1.0 - (e - half) / half)
    }
}

/// Adam with bias correction, no weight decay. Parameters are updated in
/// name order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<f32>>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gd = *gv as f64;
                let mn = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gd;
                let vn = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gd * gd;
                *mv = mn as f32;
                *vv = vn as f32;
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *pv = (*pv as f64 - update) as f32;
            }
        }
    }
}

/// How a training run starts.
#[derive(Clone, Debug)]
pub enum InitFrom {
    /// Fresh seeded initialization of the given architecture.
    Fresh(ModelConfig),
    /// Weights (and normalization statistics) of a pretrained checkpoint;
    /// optimizer and schedule restart.
    Weights(Checkpoint),
    /// Continue an interrupted run: weights, optimizer moments, epoch
    /// counter and sampler state.
    Resume(Checkpoint),
}

fn rng_state(rng: &ChaCha8Rng) -> Value {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    json!({
        "algorithm": "chacha8",
        "seed": seed,
        "stream": rng.get_stream(),
        "word_pos": rng.get_word_pos().to_string(),
    })
}

fn restore_rng(v: &Value) -> Result<ChaCha8Rng> {
    let bad = || invalid!("checkpoint has a malformed rng state");
    let hex = v.get("seed").and_then(Value::as_str).ok_or_else(bad)?;
    if hex.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let stream = v.get("stream").and_then(Value::as_u64).ok_or_else(bad)?;
    let pos: u128 = v.get("word_pos").and_then(Value::as_str).ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Mean loss terms over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct EpochLoss {
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub ssim: f64,
    pub illu: f64,
}

/// Trainable network, optimizer and sampler state.
pub struct Trainer {
    pub state: NetworkState,
    pub cfg: TrainConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: usize,
    stack: FeatureStack,
}

impl Trainer {
    pub fn new(init: InitFrom, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut epoch = 0;
        let state = match init {
            InitFrom::Fresh(model) => {
                if cfg.freeze_norm_stats {
                    return Err(invalid!("freezing normalization statistics needs a pretrained checkpoint"));
                }
                NetworkState::init(&model)?
            }
            InitFrom::Weights(ck) => NetworkState::from_checkpoint(&ck)?.0,
            InitFrom::Resume(ck) => {
                let (state, rest) = NetworkState::from_checkpoint(&ck)?;
                for (name, t) in rest {
                    if let Some(p) = name.strip_prefix(ADAM_M) {
                        adam.m.insert(p.to_string(), t);
                    } else if let Some(p) = name.strip_prefix(ADAM_V) {
                        adam.v.insert(p.to_string(), t);
                    }
                }
                let progress = ck.config.get("progress").ok_or_else(|| invalid!("checkpoint has no training progress"))?;
                epoch = progress.get("epoch").and_then(Value::as_u64).ok_or_else(|| invalid!("progress lacks epoch"))? as usize;
                adam.t = progress.get("step").and_then(Value::as_u64).ok_or_else(|| invalid!("progress lacks step"))?;
                rng = restore_rng(&ck.rng_state)?;
                state
            }
        };
        if cfg.pipeline == Pipeline::LearnedWb && !state.config.features.adapt_illuminants {
            return Err(invalid!("the learned-wb pipeline needs the adapt_illuminants feature"));
        }
        Ok(Self { state, cfg: cfg.clone(), adam, rng, epoch, stack: FeatureStack::new(DEFAULT_FEATURE_SEED) })
    }

    fn norm_mode(&self) -> NormMode {
        if self.cfg.freeze_norm_stats {
            NormMode::Frozen
        } else {
            NormMode::Train
        }
    }

    /// One optimizer step on a collated batch; returns the loss terms.
    pub fn step(&mut self, batch: &TrainBatch<f32>, lr: f64) -> Result<EpochLoss> {
        let mut g = Graph::<f32>::new();
        let p = self.state.bind(&mut g, true);
        let inp = batch.inputs.place(&mut g);
        let out = forward(&mut g, &self.state, &p, &inp, self.cfg.pipeline, self.norm_mode())?;
        let gt = g.constant(batch.gt.clone());
        let terms = match self.cfg.pipeline {
            Pipeline::MetaWb => total_loss(&mut g, &self.stack, out.y, gt, &batch.mask, &self.cfg.loss)?,
            Pipeline::LearnedWb => {
                total_loss_wb(&mut g, &self.stack, out.y, gt, &batch.mask, out.aux.wb_used, &batch.wb_dg, &self.cfg.loss)?
            }
        };
        let val = |v: Var| g.value(v).item() as f64;
        let loss = EpochLoss {
            total: val(terms.total),
            l1: val(terms.l1),
            perceptual: val(terms.perceptual),
            ssim: val(terms.ssim),
            illu: terms.illu.map_or(0.0, val),
        };
        if !loss.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {}", loss.total)));
        }
        let mut grads = g.backward(terms.total)?;
        let mut by_name = BTreeMap::new();
        for (name, v) in p.iter() {
            if let Some(t) = grads.take(*v) {
                by_name.insert(name.clone(), t);
            }
        }
        if by_name.values().any(|t| !t.is_finite()) {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        self.adam.step(&mut self.state.params, &by_name, lr);
        if self.norm_mode() == NormMode::Train {
            update_running_stats(&mut self.state, &out.norm_stats)?;
        }
        Ok(loss)
    }

    fn steps_per_epoch(&self, data: &Dataset) -> usize {
        self.cfg.steps_per_epoch.unwrap_or_else(|| data.num_patches().div_ceil(self.cfg.batch_size))
    }

    /// Runs the next epoch; returns the mean loss terms.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochLoss> {
        if data.num_devices != self.state.config.num_devices {
            return Err(invalid!(
                "dataset has {} devices, model expects {}",
                data.num_devices,
                self.state.config.num_devices
            ));
        }
        let lr = lr_at(self.epoch, &self.cfg);
        let steps = self.steps_per_epoch(data);
        let mut acc = EpochLoss::default();
        for _ in 0..steps {
            let samples = sample_batch(data, self.cfg.batch_size, &mut self.rng)?;
            let batch = collate::<f32>(&samples, data.num_devices, None)?;
            let l = self.step(&batch, lr)?;
            acc.total += l.total;
            acc.l1 += l.l1;
            acc.perceptual += l.perceptual;
            acc.ssim += l.ssim;
            acc.illu += l.illu;
        }
        let n = steps as f64;
        self.epoch += 1;
        Ok(EpochLoss { total: acc.total / n, l1: acc.l1 / n, perceptual: acc.perceptual / n, ssim: acc.ssim / n, illu: acc.illu / n })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut extra = Vec::with_capacity(2 * self.adam.m.len());
        for (k, t) in &self.adam.m {
            extra.push((format!("{ADAM_M}{k}"), t.clone()));
        }
        for (k, t) in &self.adam.v {
            extra.push((format!("{ADAM_V}{k}"), t.clone()));
        }
        let mut cfg = serde_json::Map::new();
        cfg.insert("train".into(), serde_json::to_value(&self.cfg)?);
        cfg.insert("progress".into(), json!({ "epoch": self.epoch, "step": self.adam.t }));
        self.state.to_checkpoint(extra, cfg, rng_state(&self.rng))
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const DIVERGED_CHECKPOINT: &str = "diverged.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub state: NetworkState,
    pub losses: Vec<EpochLoss>,
    pub last_checkpoint: PathBuf,
}

pub fn load_config(cfg: &TrainConfig, model: &ModelConfig) -> LoadConfig {
    LoadConfig {
        patch_size: cfg.patch_size,
        flow_mode: cfg.flow_mode,
        full_size: model.features.global_semantics.then_some(model.xcit.input_size),
    }
}

/// Trains until `cfg.epochs`, writing the per-epoch log and checkpoints
/// under `out_dir`.
pub fn train(manifest: &Manifest, init: InitFrom, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(init, cfg)?;
    let load = load_config(cfg, &trainer.state.config);
    let train_data = Dataset::load(manifest, Split::Train, &load)?;
    let val_data = if cfg.validate && !manifest.scenes(Split::Val).is_empty() {
        Some(Dataset::load(manifest, Split::Val, &load)?)
    } else {
        None
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = OpenOptions::new()
        .create(true)
        .append(trainer.epoch > 0)
        .write(true)
        .truncate(trainer.epoch == 0)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut losses = Vec::new();
    while trainer.epoch < cfg.epochs {
        let epoch = trainer.epoch;
        let lr = lr_at(epoch, cfg);
        let snapshot = trainer.state.clone();
        let loss = match trainer.run_epoch(&train_data) {
            Err(Error::Diverged(msg)) => {
                let dump = out_dir.join(DIVERGED_CHECKPOINT);
                trainer.state = snapshot;
                save_checkpoint(&trainer.checkpoint()?, &dump)?;
                return Err(Error::Diverged(format!("{msg} in epoch {epoch}; state dumped to {}", dump.display())));
            }
            r => r?,
        };
        let mut entry = json!({ "epoch": epoch, "lr": lr, "train_loss": loss.total, "terms": loss });
        if let Some(val) = &val_data {
            let report = evaluate(val, &trainer.state, cfg.pipeline, "val")?;
            let devices: serde_json::Map<String, Value> = report
                .devices
                .iter()
                .map(|d| (d.device_id.to_string(), json!({ "psnr": d.psnr, "ssim": d.ssim, "delta_e": d.delta_e })))
                .collect();
            entry["val"] = Value::Object(devices);
        }
        writeln!(log, "{entry}").map_err(|e| Error::io(&log_path, e))?;
        losses.push(loss);
        let done = trainer.epoch;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save_checkpoint(&trainer.checkpoint()?, &out_dir.join(epoch_checkpoint_name(done)))?;
        }
    }
    let last = out_dir.join(LAST_CHECKPOINT);
    save_checkpoint(&trainer.checkpoint()?, &last)?;
    Ok(TrainSummary { state: trainer.state, losses, last_checkpoint: last })
}

/// Predicted renditions `[scene][target]` in each target's device style.
pub fn render_split(data: &Dataset, state: &NetworkState, pipeline: Pipeline) -> Result<Vec<Vec<Image>>> {
    let k = state.config.num_devices;
    data.scenes
        .par_iter()
        .map(|scene| {
            scene
                .targets
                .iter()
                .map(|t| {
                    let w = one_hot(t.device_id as usize, k)?;
                    Ok(infer(state, &scene.raw, &w, pipeline)?.image.image)
                })
                .collect()
        })
        .collect()
}

/// Per-device metrics of the model's renditions against the aligned,
/// masked ground truths.
pub fn evaluate(data: &Dataset, state: &NetworkState, pipeline: Pipeline, split: &str) -> Result<MetricReport> {
    let preds = render_split(data, state, pipeline)?;
    let mut acc = MetricAccumulator::new();
    for (scene, ys) in data.scenes.iter().zip(&preds) {
        for (t, y) in scene.targets.iter().zip(ys) {
            acc.add(t.device_id, &format!("{}/d{}", scene.id, t.device_id), y, &t.gt, &t.mask)?;
        }
    }
    Ok(acc.finish(split))
}

// ---------------------------------------------------------------------------
// gradient verification

/// Differentiable unit checked by [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Block {
    Linear,
    Conv,
    Wavelet,
    EncoderAttention,
    DecoderAttention,
    Xca,
    GlobalSemantics,
    WbBranch,
    IllumBranch,
    IsoExp,
    Losses,
    /// Whole network plus total loss.
    Full,
}

impl Block {
    pub const ALL: [Block; 12] = [
        Block::Linear,
        Block::Conv,
        Block::Wavelet,
        Block::EncoderAttention,
        Block::DecoderAttention,
        Block::Xca,
        Block::GlobalSemantics,
        Block::WbBranch,
        Block::IllumBranch,
        Block::IsoExp,
        Block::Losses,
        Block::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Linear => "linear",
            Block::Conv => "conv",
            Block::Wavelet => "wavelet",
            Block::EncoderAttention => "encoder-attention",
            Block::DecoderAttention => "decoder-attention",
            Block::Xca => "xca",
            Block::GlobalSemantics => "global-semantics",
            Block::WbBranch => "wb-branch",
            Block::IllumBranch => "illum-branch",
            Block::IsoExp => "iso-exp",
            Block::Losses => "losses",
            Block::Full => "full",
        }
    }

    /// Acceptance bound on the relative error.
    pub fn tolerance(self) -> f64 {
        match self {
            Block::Full => 1e-3,
            _ => 1e-4,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Block::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| {
            let names: Vec<_> = Block::ALL.iter().map(|b| b.name()).collect();
            invalid!("unknown block {s:?}; expected one of {}", names.join(", "))
        })
    }
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Scalar `sum(out * r)` with fixed pseudo-random `r`, so every output
/// element contributes with a distinct weight.
fn project(g: &mut Graph<f64>, out: Var) -> metaisp_autograd::Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let r = Tensor::new(&shape, (0..n).map(|i| (1.3 * i as f64 + 0.1).sin()).collect())?;
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum_all(prod))
}

fn pick_coords(inputs: &[Tensor<f64>], per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= per_tensor {
                return (0..n).collect();
            }
            let mut idx: Vec<usize> = (0..per_tensor).map(|_| rng.random_range(0..n)).collect();
            idx.sort_unstable();
            idx.dedup();
            idx
        })
        .collect()
}

fn shape_err(e: Error) -> metaisp_autograd::Error {
    metaisp_autograd::Error::Shape(e.to_string())
}

type BlockFn<'a> = dyn Fn(&mut Graph<f64>, &Params, &[Var]) -> Result<Var> + 'a;

/// Checks `f` with respect to `extra` inputs and the named parameters of
/// `state` (all other parameters held constant).
fn check_block(
    state: &NetworkState,
    names: &[String],
    extra: Vec<Tensor<f64>>,
    per_tensor: usize,
    eps: f64,
    rng: &mut ChaCha8Rng,
    f: &BlockFn<'_>,
) -> Result<GradReport> {
    let n_extra = extra.len();
    let mut inputs = extra;
    for n in names {
        inputs.push(state.param(n)?.cast::<f64>());
    }
    let coords = pick_coords(&inputs, per_tensor, rng);
    let report = check_gradients(
        |g, vars| {
            let mut p = state.bind::<f64>(g, false);
            for (n, v) in names.iter().zip(&vars[n_extra..]) {
                p.insert(n.clone(), *v);
            }
            let out = f(g, &p, &vars[..n_extra]).map_err(shape_err)?;
            project(g, out)
        },
        &inputs,
        Some(&coords),
        eps,
    )?;
    Ok(report)
}

fn names_with_prefix(state: &NetworkState, prefix: &str) -> Vec<String> {
    state.params.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
}

/// Central-difference check of one block on small randomized shapes, in
/// double precision. `eps` is the difference step.
pub fn grad_check(cfg: &ModelConfig, block: Block, eps: f64) -> Result<GradReport> {
    let eps = if eps > 0.0 { eps } else { DEFAULT_STEP };
    let cfg = ModelConfig { features: Features::all(), conditioning: true, ..cfg.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6C4E);
    let standalone = |inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>| -> Result<GradReport> {
        Ok(check_gradients(
            |g, v| {
                let out = f(g, v).map_err(shape_err)?;
                project(g, out)
            },
            &inputs,
            None,
            eps,
        )?)
    };
    match block {
        Block::Linear => standalone(
            vec![random_tensor(&[3, 5], -1.0, 1.0, &mut rng), random_tensor(&[5, 4], -1.0, 1.0, &mut rng), random_tensor(&[4], -1.0, 1.0, &mut rng)],
            &|g, v| Ok(g.linear(v[0], v[1], Some(v[2]))?),
        ),
        Block::Conv => standalone(
            vec![
                random_tensor(&[2, 3, 6, 6], -1.0, 1.0, &mut rng),
                random_tensor(&[4, 3, 3, 3], -1.0, 1.0, &mut rng),
                random_tensor(&[4], -1.0, 1.0, &mut rng),
            ],
            &|g, v| Ok(g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?),
        ),
        Block::Wavelet => standalone(vec![random_tensor(&[2, 3, 4, 6], -1.0, 1.0, &mut rng)], &|g, v| {
            let d = wavelet::dwt_haar(g, v[0])?;
            let sq = g.mul(d, d)?;
            wavelet::idwt_haar(g, sq)
        }),
        _ => {
            let state = NetworkState::init(&cfg)?;
            model_block_check(&cfg, &state, block, eps, &mut rng)
        }
    }
}

fn model_block_check(cfg: &ModelConfig, state: &NetworkState, block: Block, eps: f64, rng: &mut ChaCha8Rng) -> Result<GradReport> {
    let b = 2;
    let coords = vec![(0, 0), (4, 8)];
    let heads = cfg.attn_heads;
    let w1 = cfg.widths[1.min(cfg.levels - 1)];
    match block {
        Block::EncoderAttention => {
            let name = "enc1.rab0.attn";
            let f = random_tensor(&[b, 16, w1], -1.0, 1.0, rng);
            let pe = patch_positions::<f64>(&coords, 2, 4, 4, w1);
            check_block(state, &names_with_prefix(state, &format!("{name}.")), vec![f], 12, eps, rng, &|g, p, v| {
                let pe = g.constant(pe.clone());
                encoder_attention(g, p, name, v[0], Some(pe), heads)
            })
        }
        Block::DecoderAttention => {
            let name = "dec1.rab0.attn";
            let f = random_tensor(&[b, 16, w1], -1.0, 1.0, rng);
            let e = random_tensor(&[b, cfg.embed_dim], -1.0, 1.0, rng);
            let pe = patch_positions::<f64>(&coords, 2, 4, 4, w1);
            check_block(state, &names_with_prefix(state, &format!("{name}.")), vec![f, e], 12, eps, rng, &|g, p, v| {
                let pe = g.constant(pe.clone());
                decoder_attention(g, p, name, v[0], Some(v[1]), Some(pe), heads)
            })
        }
        Block::Xca => {
            let dim = cfg.xcit.dim;
            let x = random_tensor(&[b, 5, dim], -1.0, 1.0, rng);
            let mut names = names_with_prefix(state, "gs.blk0.qkv.");
            names.extend(names_with_prefix(state, "gs.blk0.proj."));
            names.push("gs.blk0.temp".into());
            check_block(state, &names, vec![x], 12, eps, rng, &|g, p, v| xca(g, p, "gs.blk0", v[0], cfg.xcit.heads))
        }
        Block::GlobalSemantics => {
            let s = cfg.xcit.input_size;
            let x = random_tensor(&[b, 4, s, s], 0.0, 1.0, rng);
            let names = names_with_prefix(state, "gs.");
            check_block(state, &names, vec![x], 3, eps, rng, &|g, p, v| {
                let mut stats = Vec::new();
                global_semantics(g, cfg, p, state, v[0], NormMode::Train, &mut stats)
            })
        }
        Block::WbBranch => {
            let wb = random_tensor(&[b, 4], 1.0, 2.5, rng);
            check_block(state, &names_with_prefix(state, "wb."), vec![wb], 12, eps, rng, &|g, p, v| {
                let (s0, s1) = wb_branch(g, cfg, p, v[0])?.ok_or_else(|| invalid!("wb branch disabled"))?;
                match s1 {
                    Some(s1) => {
                        let a = g.sum_all(s0);
                        let bsum = g.sum_all(s1);
                        Ok(g.add(a, bsum)?)
                    }
                    None => Ok(s0),
                }
            })
        }
        Block::IllumBranch => {
            let x4 = random_tensor(&[b, 4, 8, 8], 0.0, 1.0, rng);
            let e = random_tensor(&[b, cfg.embed_dim], -1.0, 1.0, rng);
            check_block(state, &names_with_prefix(state, "illum."), vec![x4, e], 12, eps, rng, &|g, p, v| {
                illum_branch(g, cfg, p, v[0], Some(v[1]))
            })
        }
        Block::IsoExp => {
            let ie = random_tensor(&[b, 2], -1.0, 3.0, rng);
            check_block(state, &names_with_prefix(state, "isoexp."), vec![ie], 12, eps, rng, &|g, p, v| {
                let (a, be) = iso_exp_branch(g, cfg, p, v[0])?.ok_or_else(|| invalid!("iso/exp branch disabled"))?;
                Ok(g.concat(&[a, be], 1)?)
            })
        }
        Block::Losses => {
            let y = random_tensor(&[b, 3, 16, 16], 0.1, 0.9, rng);
            let gt = random_tensor(&[b, 3, 16, 16], 0.1, 0.9, rng);
            let wb_d = random_tensor(&[b, 4], 1.0, 2.5, rng);
            let wb_dg = random_tensor(&[b, 4], 1.0, 2.5, rng);
            let mask = Tensor::new(&[b, 1, 16, 16], (0..b * 256).map(|i| if i % 7 == 3 { 0.0 } else { 1.0 }).collect())?;
            let stack = FeatureStack::new(DEFAULT_FEATURE_SEED);
            let w = LossWeights::default();
            check_block(state, &[], vec![y, wb_d], 40, eps, rng, &|g, _, v| {
                let gtv = g.constant(gt.clone());
                Ok(total_loss_wb(g, &stack, v[0], gtv, &mask, v[1], &wb_dg, &w)?.total)
            })
        }
        Block::Full => {
            let m = cfg.size_multiple();
            let s = cfg.xcit.input_size;
            let x4 = random_tensor(&[b, 4, m, m], 0.0, 1.0, rng);
            let x_full = random_tensor(&[b, 4, s, s], 0.0, 1.0, rng);
            let gt = random_tensor(&[b, 3, 2 * m, 2 * m], 0.1, 0.9, rng);
            let wb = random_tensor(&[b, 4], 1.0, 2.5, rng);
            let ie = random_tensor(&[b, 2], -1.0, 3.0, rng);
            let k = cfg.num_devices;
            let weights = Tensor::new(&[b, k], (0..b * k).map(|i| if i % k == i / k % k { 1.0 } else { 0.0 }).collect())?;
            let mask = Tensor::<f64>::ones(&[b, 1, 2 * m, 2 * m]);
            let stack = FeatureStack::new(DEFAULT_FEATURE_SEED);
            let w = LossWeights::default();
            let names: Vec<String> = [
                "embed.table",
                "wb.l0.w",
                "isoexp.out.w",
                "enc0.in.w",
                "enc0.rab0.c1.w",
                "enc0.rab0.attn.k.w",
                "bott.in.w",
                "bott.proj.w",
                "gs.embed.w",
                "gs.blk0.qkv.w",
                "gs.head.w",
                "dec0.rab0.attn.qproj.w",
                "dec0.fuse.w",
                "head.w",
            ]
            .iter()
            .filter(|n| state.params.contains_key(**n))
            .map(|n| n.to_string())
            .collect();
            check_block(state, &names, vec![x4], 4, eps, rng, &|g, p, v| {
                let inp = crate::nnisp::InputVars {
                    x4: v[0],
                    wb: g.constant(wb.clone()),
                    iso_exp: g.constant(ie.clone()),
                    weights: g.constant(weights.clone()),
                    x_full: Some(g.constant(x_full.clone())),
                    coords: coords.clone(),
                };
                let out = forward(g, state, p, &inp, Pipeline::MetaWb, NormMode::Train)?;
                let gtv = g.constant(gt.clone());
                Ok(total_loss(g, &stack, out.y, gtv, &mask, &w)?.total)
            })
        }
        Block::Linear | Block::Conv | Block::Wavelet => unreachable!("standalone blocks"),
    }
}
