mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use metaisp::align::{flow_block_match, warp_bilinear};
use metaisp::data::{build_synth_dataset, open_dataset, read_presets, Dataset};
use metaisp::imageio::{
    load_checkpoint, read_flow, read_raw, read_rgb, write_flow, write_gray, write_rgb, ColorSpace, Image, RgbImage, Split,
};
use metaisp::nnisp::{infer, interpolate_weights, one_hot, Features, NetworkState, Pipeline};
use metaisp::refisp::{forward_isp, StyleParams};
use metaisp::train::{evaluate, grad_check, load_config, train, Block, InitFrom};
use serde_json::json;

use config::CliConfig;

#[derive(Parser)]
#[command(name = "metaisp", version, about = "Device-conditioned RAW-to-sRGB rendering toolkit")]
struct Cli {
    /// JSON configuration file (sections: synth, model, train).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a synthetic multi-device dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or finetune from --init) on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from the weights of a pretrained checkpoint.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        /// Continue an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Keep the normalization statistics of --init fixed.
        #[arg(long, requires = "init")]
        freeze_norm_stats: bool,
        /// Ablation row A..E (overrides model.features).
        #[arg(long)]
        row: Option<char>,
    },
    /// Train from scratch on a pretraining corpus.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        row: Option<char>,
    },
    /// Per-device metrics of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render a RAW capture in a device style or a mixture of styles.
    Infer {
        raw: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "weights")]
        device: Option<usize>,
        /// Comma-separated mixing weights, normalized to sum to 1.
        #[arg(long, allow_hyphen_values = true)]
        weights: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Horizontal strip of renditions interpolated between two devices.
    InterpGrid {
        raw: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the white balance the illumination branch predicts for a device.
    EstimateWb {
        raw: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        device: usize,
    },
    /// Reference ISP rendering with a device preset (identity style without one).
    Isp {
        raw: PathBuf,
        /// Preset file written by synth-data.
        #[arg(long)]
        presets: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        device: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Block-matching flow from SRC to DST (.flo).
    Flow {
        src: PathBuf,
        dst: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 4)]
        radius: usize,
    },
    /// Backward-warp an image by a flow; optionally write the validity mask.
    Warp {
        image: PathBuf,
        flow: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Finite-difference gradient verification of the network blocks.
    Gradcheck {
        /// One block name; all blocks when omitted.
        #[arg(long)]
        block: Option<String>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

fn warn(msg: &str) {
    eprintln!("{}", json!({ "warning": msg }));
}

fn apply_row(cfg: &mut CliConfig, row: Option<char>) -> Result<()> {
    if let Some(r) = row {
        cfg.model.features = Features::row(r).with_context(|| format!("unknown ablation row {r:?}; expected A..E"))?;
    }
    Ok(())
}

fn load_state(path: &Path) -> Result<NetworkState> {
    let ck = load_checkpoint(path)?;
    Ok(NetworkState::from_checkpoint(&ck)?.0)
}

/// Parses `w0,w1,...` and rescales onto the simplex (sum 1).
fn parse_weights(s: &str, k: usize) -> Result<Vec<f64>> {
    let w: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().with_context(|| format!("bad weight {t:?}")))
        .collect::<Result<_>>()?;
    if w.len() != k {
        bail!("{} weights given, the checkpoint has {} devices", w.len(), k);
    }
    if w.iter().any(|v| !v.is_finite()) {
        bail!("weights must be finite");
    }
    let sum: f64 = w.iter().sum();
    if sum.abs() < 1e-12 {
        bail!("weights sum to zero and cannot be normalized");
    }
    let on_simplex = w.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() <= 1e-9;
    if on_simplex {
        return Ok(w);
    }
    let n: Vec<f64> = w.iter().map(|v| v / sum).collect();
    warn(&format!("weights {w:?} are not on the simplex; normalized to {n:?}"));
    Ok(n)
}

fn device_weights(state: &NetworkState, device: Option<usize>, weights: Option<&str>) -> Result<Vec<f64>> {
    let k = state.config.num_devices;
    match (device, weights) {
        (Some(d), None) => Ok(one_hot(d, k)?),
        (None, Some(w)) => parse_weights(w, k),
        _ => bail!("give exactly one of --device or --weights"),
    }
}

fn hstack(images: &[Image]) -> Result<Image> {
    let first = images.first().context("nothing to stack")?;
    let (h, c) = (first.height, first.channels);
    let w: usize = images.iter().map(|i| i.width).sum();
    let mut out = Image::zeros(w, h, c);
    let mut x0 = 0;
    for img in images {
        for y in 0..h {
            for x in 0..img.width {
                for ch in 0..c {
                    out.set(y, x0 + x, ch, img.get(y, x, ch));
                }
            }
        }
        x0 += img.width;
    }
    Ok(out)
}

fn parse_split(s: &str) -> Result<Split> {
    serde_json::from_value(json!(s)).with_context(|| format!("unknown split {s:?}; expected train, val or test"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::SynthData { out } => {
            config::echo(&cfg, &out)?;
            let manifest = build_synth_dataset(&cfg.synth, &out)?;
            println!("{}", json!({ "dataset": out, "records": manifest.records.len(), "scenes": cfg.synth.num_scenes }));
        }
        Command::Train { data, out, init, resume, freeze_norm_stats, row } => {
            apply_row(&mut cfg, row)?;
            if freeze_norm_stats {
                cfg.train.freeze_norm_stats = true;
            }
            let manifest = open_dataset(&data)?;
            let start = match (init, resume) {
                (Some(p), None) => InitFrom::Weights(load_checkpoint(&p)?),
                (None, Some(p)) => InitFrom::Resume(load_checkpoint(&p)?),
                _ => {
                    check_devices(&cfg, manifest.devices().len())?;
                    InitFrom::Fresh(cfg.model.clone())
                }
            };
            config::echo(&cfg, &out)?;
            let s = train(&manifest, start, &cfg.train, &out)?;
            println!("{}", json!({ "checkpoint": s.last_checkpoint, "epochs": s.losses.len(), "final_loss": s.losses.last().map(|l| l.total) }));
        }
        Command::Pretrain { data, out, row } => {
            apply_row(&mut cfg, row)?;
            cfg.train.freeze_norm_stats = false;
            let manifest = open_dataset(&data)?;
            check_devices(&cfg, manifest.devices().len())?;
            config::echo(&cfg, &out)?;
            let s = train(&manifest, InitFrom::Fresh(cfg.model.clone()), &cfg.train, &out)?;
            println!("{}", json!({ "checkpoint": s.last_checkpoint, "epochs": s.losses.len(), "final_loss": s.losses.last().map(|l| l.total) }));
        }
        Command::Eval { data, checkpoint, out, split } => {
            let split_kind = parse_split(&split)?;
            let state = load_state(&checkpoint)?;
            let manifest = open_dataset(&data)?;
            let ds = Dataset::load(&manifest, split_kind, &load_config(&cfg.train, &state.config))?;
            let report = evaluate(&ds, &state, cfg.train.pipeline, &split)?;
            if let Some(dir) = out {
                config::echo(&cfg, &dir)?;
                std::fs::write(dir.join("metrics.json"), report.to_json()? + "\n")?;
                std::fs::write(dir.join("metrics.txt"), report.to_table())?;
            }
            print!("{}", report.to_table());
        }
        Command::Infer { raw, checkpoint, device, weights, out } => {
            let state = load_state(&checkpoint)?;
            let w = device_weights(&state, device, weights.as_deref())?;
            let pred = infer(&state, &read_raw(&raw)?, &w, cfg.train.pipeline)?;
            write_rgb(&pred.image, &out)?;
            config::echo_beside(&cfg, &out)?;
            println!("{}", json!({ "output": out, "weights": w, "wb_used": pred.wb_used }));
        }
        Command::InterpGrid { raw, checkpoint, from, to, steps, out } => {
            if steps < 2 {
                bail!("need at least 2 steps");
            }
            let state = load_state(&checkpoint)?;
            let k = state.config.num_devices;
            let capture = read_raw(&raw)?;
            let mut tiles = Vec::with_capacity(steps);
            for i in 0..steps {
                let t = i as f64 / (steps - 1) as f64;
                let w = interpolate_weights(from, to, t, k)?;
                tiles.push(infer(&state, &capture, &w, cfg.train.pipeline)?.image.image);
            }
            let grid = RgbImage::new(hstack(&tiles)?, ColorSpace::Srgb)?;
            write_rgb(&grid, &out)?;
            config::echo_beside(&cfg, &out)?;
            println!("{}", json!({ "output": out, "tiles": steps }));
        }
        Command::EstimateWb { raw, checkpoint, device } => {
            let state = load_state(&checkpoint)?;
            let w = one_hot(device, state.config.num_devices)?;
            let pred = infer(&state, &read_raw(&raw)?, &w, Pipeline::LearnedWb)?;
            println!("{}", json!(pred.wb_used));
        }
        Command::Isp { raw, presets, device, out } => {
            let style = match presets {
                Some(p) => read_presets(&p)?
                    .into_iter()
                    .find(|d| d.device_id == device)
                    .map(|d| d.style)
                    .with_context(|| format!("no preset for device {device} in {}", p.display()))?,
                None => StyleParams::identity(),
            };
            let img = forward_isp(&read_raw(&raw)?, &style)?;
            write_rgb(&img, &out)?;
            config::echo_beside(&cfg, &out)?;
            println!("{}", json!({ "output": out }));
        }
        Command::Flow { src, dst, out, levels, radius } => {
            let flow = flow_block_match(&read_rgb(&src)?, &read_rgb(&dst)?, levels, radius)?;
            write_flow(&flow, &out)?;
            config::echo_beside(&cfg, &out)?;
            println!("{}", json!({ "output": out }));
        }
        Command::Warp { image, flow, out, mask_out } => {
            let img = read_rgb(&image)?;
            let (warped, mask) = warp_bilinear(&img.image, &read_flow(&flow)?)?;
            write_rgb(&RgbImage::new(warped, img.colorspace)?, &out)?;
            if let Some(m) = &mask_out {
                write_gray(&mask, m)?;
            }
            config::echo_beside(&cfg, &out)?;
            println!("{}", json!({ "output": out, "mask": mask_out }));
        }
        Command::Gradcheck { block, eps } => {
            let blocks = match block {
                Some(b) => vec![b.parse::<Block>()?],
                None => Block::ALL.to_vec(),
            };
            let mut failed = Vec::new();
            for b in blocks {
                let r = grad_check(&cfg.model, b, eps)?;
                let pass = r.max_rel_err < b.tolerance();
                if !pass {
                    failed.push(b.name());
                }
                println!(
                    "{}",
                    json!({ "block": b.name(), "max_rel_err": r.max_rel_err, "tolerance": b.tolerance(), "checked": r.checked, "worst": r.worst, "pass": pass })
                );
            }
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn check_devices(cfg: &CliConfig, k: usize) -> Result<()> {
    if cfg.model.num_devices != k {
        bail!("dataset has {k} devices but model.num_devices is {}; pass --set model.num_devices={k}", cfg.model.num_devices);
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<metaisp::Error>())
        .map_or("error", metaisp::Error::kind)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": e.to_string().trim_end() } }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": error_kind(&e), "message": format!("{e:#}") } }));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simplex_weights_pass_through() {
        assert_eq!(parse_weights("1,0,0", 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(parse_weights("2,2", 2).unwrap(), vec![0.5, 0.5]);
        assert!(parse_weights("1,-1", 2).is_err());
        assert!(parse_weights("1,0", 3).is_err());
    }

    #[test]
    fn split_names() {
        assert_eq!(parse_split("val").unwrap(), Split::Val);
        assert!(parse_split("dev").is_err());
    }
}
