//! The single JSON configuration shared by every subcommand, with dotted
//! `--set key.path=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use metaisp::data::SynthConfig;
use metaisp::nnisp::{ModelConfig, Scale};
use metaisp::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl CliConfig {
    fn preset(scale: Scale) -> Self {
        let synth = SynthConfig::default();
        let k = synth.num_devices;
        let (model, train) = match scale {
            Scale::Toy => (ModelConfig::toy(k), TrainConfig::default()),
            Scale::Full => (ModelConfig::full(k), TrainConfig::full()),
        };
        Self { synth, model, train }
    }
}

/// Recursively copies `src` into `dst`; every key of `src` must already
/// exist in `dst`.
fn merge(dst: &mut Value, src: &Value, path: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match d.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => bail!("unknown config key {here:?}"),
                }
            }
            Ok(())
        }
        (d, s) => {
            *d = s.clone();
            Ok(())
        }
    }
}

/// `key.path=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s.split_once('=').with_context(|| format!("override {s:?} is not key=value"))?;
    if key.is_empty() {
        bail!("override {s:?} has an empty key");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn apply_override(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, k) in path.iter().enumerate() {
        let so_far = path[..=i].join(".");
        cur = cur
            .as_object_mut()
            .and_then(|o| o.get_mut(k))
            .with_context(|| format!("unknown config key {so_far:?}"))?;
    }
    *cur = value;
    Ok(())
}

fn scale_hint(file: Option<&Value>, overrides: &[(Vec<String>, Value)]) -> Result<Scale> {
    let from_overrides = overrides.iter().rev().find(|(p, _)| p == &["model", "scale"]).map(|(_, v)| v.clone());
    let from_file = file.and_then(|f| f.pointer("/model/scale")).cloned();
    match from_overrides.or(from_file) {
        Some(v) => serde_json::from_value(v).context("model.scale must be \"toy\" or \"full\""),
        None => Ok(Scale::Toy),
    }
}

/// Builds the effective configuration: preset defaults (chosen by
/// `model.scale`), then the file, then the overrides in order.
pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<CliConfig> {
    let file_value: Option<Value> = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?)
        }
        None => None,
    };
    let parsed: Vec<_> = overrides.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
    let base = CliConfig::preset(scale_hint(file_value.as_ref(), &parsed)?);
    let mut value = serde_json::to_value(&base)?;
    if let Some(f) = &file_value {
        if !f.is_object() {
            bail!("config file must hold a JSON object");
        }
        merge(&mut value, f, "")?;
    }
    for (path, v) in parsed {
        apply_override(&mut value, &path, v)?;
    }
    let cfg: CliConfig = serde_json::from_value(value).context("invalid configuration")?;
    cfg.synth.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub const ECHO_FILE: &str = "effective_config.json";

/// Writes the effective configuration into an output directory.
pub fn echo(cfg: &CliConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(ECHO_FILE);
    let text = serde_json::to_string_pretty(cfg)? + "\n";
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Echo for single-file outputs: `<file>.config.json` beside it.
pub fn echo_beside(cfg: &CliConfig, file: &Path) -> Result<()> {
    let mut name = file.file_name().context("output path has no file name")?.to_os_string();
    name.push(".config.json");
    let path = file.with_file_name(name);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").with_context(|| format!("writing {}", path.display()))
}
