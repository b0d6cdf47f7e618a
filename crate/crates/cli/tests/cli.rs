use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const SMALL: &[&str] = &[
    "--set",
    "synth.num_scenes=6",
    "--set",
    "synth.scene_size=64",
    "--set",
    "train.epochs=2",
    "--set",
    "train.steps_per_epoch=1",
    "--set",
    "train.batch_size=2",
    "--set",
    "train.patch_size=32",
];

fn metaisp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaisp")).args(SMALL).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = metaisp(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap_or("null")).unwrap_or(Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Dataset plus a one-epoch toy checkpoint, shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    ckpt: PathBuf,
    raw: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run = dir.path().join("run");
        ok(&["synth-data", "--out", s(&data)]);
        let v = ok(&["train", "--data", s(&data), "--out", s(&run)]);
        let ckpt = PathBuf::from(v["checkpoint"].as_str().unwrap());
        let raw = data.join("scenes/scene0000/raw.pgm");
        Fixture { _dir: dir, data, run, ckpt, raw }
    })
}

#[test]
fn pipeline_smoke_reports_every_device() {
    let f = fixture();
    assert!(f.data.join("manifest.jsonl").exists());
    assert!(f.data.join("effective_config.json").exists());
    assert!(f.run.join("effective_config.json").exists());
    assert!(f.run.join("train_log.jsonl").exists());
    let out = tempfile::tempdir().unwrap();
    let res = metaisp(&["eval", "--data", s(&f.data), "--checkpoint", s(&f.ckpt), "--out", s(out.path())]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.path().join("metrics.json")).unwrap()).unwrap();
    let text = report.to_string();
    for d in 0..3 {
        assert!(text.contains(&format!("\"device_id\":{d}")), "device {d} missing from {text}");
    }
    assert!(out.path().join("metrics.txt").exists());
    assert!(out.path().join("effective_config.json").exists());
}

#[test]
fn one_hot_weights_match_device_flag() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ppm");
    let b = dir.path().join("b.ppm");
    ok(&["infer", s(&f.raw), "--checkpoint", s(&f.ckpt), "--weights", "1,0,0", "--out", s(&a)]);
    ok(&["infer", s(&f.raw), "--checkpoint", s(&f.ckpt), "--device", "0", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.ppm.config.json").exists());
}

#[test]
fn off_simplex_weights_warn_and_normalize() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ppm");
    let b = dir.path().join("b.ppm");
    let res = metaisp(&["infer", s(&f.raw), "--checkpoint", s(&f.ckpt), "--weights", "2,2,0", "--out", s(&a)]);
    assert!(res.status.success());
    let warning: Value = serde_json::from_str(String::from_utf8_lossy(&res.stderr).lines().next().unwrap()).unwrap();
    assert!(warning["warning"].as_str().unwrap().contains("simplex"));
    ok(&["infer", s(&f.raw), "--checkpoint", s(&f.ckpt), "--weights", "0.5,0.5,0", "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn interp_grid_left_tile_is_device_rendering() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.ppm");
    let single = dir.path().join("d0.ppm");
    ok(&["interp-grid", s(&f.raw), "--checkpoint", s(&f.ckpt), "--from", "0", "--to", "1", "--steps", "3", "--out", s(&grid)]);
    ok(&["infer", s(&f.raw), "--checkpoint", s(&f.ckpt), "--device", "0", "--out", s(&single)]);
    let g = metaisp::imageio::read_rgb(&grid).unwrap().image;
    let one = metaisp::imageio::read_rgb(&single).unwrap().image;
    assert_eq!(g.width, 3 * one.width);
    for y in 0..one.height {
        for x in 0..one.width {
            assert_eq!(g.pixel(y, x), one.pixel(y, x));
        }
    }
}

#[test]
fn estimated_wb_has_unit_greens() {
    let f = fixture();
    let v = ok(&["estimate-wb", s(&f.raw), "--checkpoint", s(&f.ckpt), "--device", "2"]);
    let wb: Vec<f64> = serde_json::from_value(v).unwrap();
    assert_eq!(wb.len(), 4);
    assert_eq!(wb[1], 1.0);
    assert_eq!(wb[2], 1.0);
}

#[test]
fn unknown_device_lists_valid_ids() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let res = metaisp(&["infer", s(&f.raw), "--checkpoint", s(&f.ckpt), "--device", "7", "--out", s(&dir.path().join("x.ppm"))]);
    assert_eq!(res.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("0..=2"));
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let res = metaisp(&["isp", "/nonexistent.pgm", "--out", "/tmp/never.ppm"]);
    assert_eq!(res.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert!(err["error"]["kind"].is_string());

    let res = metaisp(&["no-such-command"]);
    assert_eq!(res.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");

    let res = metaisp(&["--set", "train.bogus=1", "gradcheck", "--block", "linear"]);
    assert_eq!(res.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&res.stderr).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("train.bogus"));
}

#[test]
fn isp_flow_and_warp_round_trip() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("isp.ppm");
    let flo = dir.path().join("self.flo");
    let warped = dir.path().join("warped.ppm");
    let mask = dir.path().join("mask.pgm");
    let presets = f.data.join("presets.json");
    ok(&["isp", s(&f.raw), "--presets", s(&presets), "--device", "1", "--out", s(&img)]);
    ok(&["flow", s(&img), s(&img), "--out", s(&flo)]);
    let flow = metaisp::imageio::read_flow(&flo).unwrap();
    assert!(flow.u.iter().chain(&flow.v).all(|&v| v == 0.0));
    ok(&["warp", s(&img), s(&flo), "--out", s(&warped), "--mask-out", s(&mask)]);
    assert_eq!(
        metaisp::imageio::read_rgb(&img).unwrap().image,
        metaisp::imageio::read_rgb(&warped).unwrap().image
    );
    assert!(dir.path().join("warped.ppm.config.json").exists());
}

#[test]
fn gradcheck_block_passes() {
    let v = ok(&["gradcheck", "--block", "linear"]);
    assert_eq!(v["pass"], true);
    assert_eq!(v["block"], "linear");
}

#[test]
fn commands_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth-data", "--out", s(&a)]);
    ok(&["synth-data", "--out", s(&b)]);
    let files = |root: &Path| {
        let mut v: Vec<_> = walk(root).into_iter().map(|p| (p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap())).collect();
        v.sort();
        v
    };
    assert_eq!(files(&a), files(&b));
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}
