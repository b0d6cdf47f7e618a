use std::path::PathBuf;
use std::sync::OnceLock;

use metaisp::data::{build_synth_dataset, Dataset, SynthConfig};
use metaisp::imageio::{load_checkpoint, save_checkpoint, Manifest, Split};
use metaisp::nnisp::{ModelConfig, NetworkState, Pipeline};
use metaisp::train::*;

struct Fixture {
    _dir: tempfile::TempDir,
    manifest: Manifest,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { num_scenes: 12, scene_size: 64, ..SynthConfig::default() };
        let manifest = build_synth_dataset(&cfg, dir.path()).unwrap();
        Fixture { _dir: dir, manifest }
    })
}

fn model() -> ModelConfig {
    ModelConfig { seed: 3, ..ModelConfig::toy(3) }
}

fn tcfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 5e-4,
        batch_size: 2,
        patch_size: 32,
        steps_per_epoch: Some(1),
        validate: false,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn out_dir() -> (tempfile::TempDir, PathBuf) {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("run");
    (d, p)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let f = fixture();
    let cfg = tcfg(10);
    let (_a, dir_a) = out_dir();
    let full = train(&f.manifest, InitFrom::Fresh(model()), &cfg, &dir_a).unwrap();

    let load = load_config(&cfg, &model());
    let data = Dataset::load(&f.manifest, Split::Train, &load).unwrap();
    let mut t = Trainer::new(InitFrom::Fresh(model()), &cfg).unwrap();
    for _ in 0..5 {
        t.run_epoch(&data).unwrap();
    }
    let (_b, dir_b) = out_dir();
    std::fs::create_dir_all(&dir_b).unwrap();
    let half = dir_b.join("half.ckpt");
    save_checkpoint(&t.checkpoint().unwrap(), &half).unwrap();
    let resumed = train(&f.manifest, InitFrom::Resume(load_checkpoint(&half).unwrap()), &cfg, &dir_b).unwrap();

    assert_eq!(resumed.losses.len(), 5);
    assert_eq!(resumed.losses[..], full.losses[5..]);
    assert_eq!(resumed.state, full.state);
    assert_eq!(std::fs::read(&resumed.last_checkpoint).unwrap(), std::fs::read(&full.last_checkpoint).unwrap());
}

#[test]
fn training_is_deterministic() {
    let f = fixture();
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let (_d, dir) = out_dir();
            let s = train(&f.manifest, InitFrom::Fresh(model()), &tcfg(2), &dir).unwrap();
            (std::fs::read(&s.last_checkpoint).unwrap(), std::fs::read(dir.join(LOG_FILE)).unwrap())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn frozen_norm_stats_stay_put() {
    let f = fixture();
    let (_d, dir) = out_dir();
    let pre = train(&f.manifest, InitFrom::Fresh(model()), &tcfg(2), &dir).unwrap();
    let ck = load_checkpoint(&pre.last_checkpoint).unwrap();
    let before = pre.state.buffers.clone();

    let frozen = TrainConfig { freeze_norm_stats: true, ..tcfg(2) };
    let (_e, dir2) = out_dir();
    let s = train(&f.manifest, InitFrom::Weights(ck.clone()), &frozen, &dir2).unwrap();
    assert_eq!(s.state.buffers, before);
    assert_ne!(s.state.params, pre.state.params);

    let (_g, dir3) = out_dir();
    let s = train(&f.manifest, InitFrom::Weights(ck), &tcfg(2), &dir3).unwrap();
    assert_ne!(s.state.buffers, before);

    assert!(Trainer::new(InitFrom::Fresh(model()), &frozen).is_err());
}

#[test]
fn thirty_epochs_halve_the_loss_and_beat_init() {
    let f = fixture();
    let cfg = TrainConfig { batch_size: 4, steps_per_epoch: Some(4), ..tcfg(30) };
    let (_d, dir) = out_dir();
    let s = train(&f.manifest, InitFrom::Fresh(model()), &cfg, &dir).unwrap();
    let first = s.losses[0].total;
    let last = s.losses.last().unwrap().total;
    assert!(last < 0.5 * first, "loss {first} -> {last}");

    let data = Dataset::load(&f.manifest, Split::Train, &load_config(&cfg, &model())).unwrap();
    let untrained = evaluate(&data, &NetworkState::init(&model()).unwrap(), Pipeline::MetaWb, "train").unwrap();
    let trained = evaluate(&data, &s.state, Pipeline::MetaWb, "train").unwrap();
    for (t, u) in trained.devices.iter().zip(&untrained.devices) {
        assert_eq!(t.device_id, u.device_id);
        assert!(t.psnr > u.psnr && t.ssim > u.ssim && t.delta_e < u.delta_e, "{t:?} vs {u:?}");
    }
}

#[test]
fn learned_wb_pipeline_trains() {
    let f = fixture();
    let cfg = TrainConfig { pipeline: Pipeline::LearnedWb, ..tcfg(2) };
    let (_d, dir) = out_dir();
    let s = train(&f.manifest, InitFrom::Fresh(model()), &cfg, &dir).unwrap();
    assert!(s.losses.iter().all(|l| l.illu > 0.0 && l.total.is_finite()));
}

#[test]
fn every_block_passes_gradcheck() {
    for b in Block::ALL {
        let r = grad_check(&model(), b, 0.0).unwrap();
        assert!(r.max_rel_err < b.tolerance(), "{b}: {}", r.max_rel_err);
        assert!(r.checked > 0);
    }
}

#[test]
fn schedule_is_flat_then_linear() {
    let cfg = TrainConfig { epochs: 10, lr: 1e-4, ..TrainConfig::default() };
    let lrs: Vec<f64> = (0..=10).map(|e| lr_at(e, &cfg)).collect();
    assert!(lrs[..5].iter().all(|&l| l == 1e-4));
    for (e, l) in lrs.iter().enumerate().skip(5) {
        assert!((l - 1e-4 * (10 - e) as f64 / 5.0).abs() < 1e-18);
    }
}
