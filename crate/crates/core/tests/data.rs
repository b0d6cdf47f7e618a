use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use metaisp::align::{hflip, hflip_flow, vflip, vflip_flow, warp_bilinear};
use metaisp::data::*;
use metaisp::imageio::{read_flow, Image, Split};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(num_scenes: usize, misalignment_px: f64) -> SynthConfig {
    SynthConfig { num_scenes, scene_size: 64, misalignment_px, ..SynthConfig::default() }
}

fn load_cfg() -> LoadConfig {
    LoadConfig { patch_size: 32, flow_mode: FlowMode::Recorded, full_size: Some(32) }
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn one_raw_and_k_targets_per_scene() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_synth_dataset(&small(10, 3.0), dir.path()).unwrap();
    assert_eq!(m.records.len(), 30);
    let raws: BTreeSet<_> = m.records.iter().map(|r| r.raw_path.clone()).collect();
    let rgbs: BTreeSet<_> = m.records.iter().map(|r| r.rgb_path.clone()).collect();
    assert_eq!((raws.len(), rgbs.len()), (10, 30));
    assert_eq!(m.devices(), vec![0, 1, 2]);
    for id in m.scenes(Split::Train).iter().chain(&m.scenes(Split::Val)).chain(&m.scenes(Split::Test)) {
        let recs = m.records_for(id);
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.split == recs[0].split && r.raw_path == recs[0].raw_path));
    }
    let reopened = open_dataset(dir.path()).unwrap();
    assert_eq!(reopened.records, m.records);
    assert_eq!(read_presets(&dir.path().join(PRESETS_FILE)).unwrap().len(), 3);
}

#[test]
fn zero_misalignment_gives_zero_flows() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_synth_dataset(&small(3, 0.0), dir.path()).unwrap();
    for r in &m.records {
        let f = read_flow(&m.resolve(r.flow_path.as_ref().unwrap())).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|&v| v == 0.0));
    }
}

#[test]
fn rebuild_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    build_synth_dataset(&small(4, 3.0), a.path()).unwrap();
    build_synth_dataset(&small(4, 3.0), b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.len() >= 4 * 7);
    assert_eq!(ta, tb);
}

#[test]
fn splits_follow_the_fractions() {
    let s = assign_splits(60, SplitFractions::default(), 0);
    let count = |x: Split| s.iter().filter(|&&v| v == x).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (42, 6, 12));
    assert_eq!(s, assign_splits(60, SplitFractions::default(), 0));
    assert_ne!(s, assign_splits(60, SplitFractions::default(), 1));
}

#[test]
fn patches_tile_the_crop() {
    assert_eq!(patch_grid(128, 128, 64, (128, 128)).unwrap().len(), 4);
    assert_eq!(patch_grid(3000, 4000, 448, (2688, 2688)).unwrap().len(), 36);
    let img = Image::new(40, 36, 3, (0..40 * 36 * 3).map(|i| i as f32).collect()).unwrap();
    let patches = extract_patches(&img, 8, (32, 32)).unwrap();
    assert_eq!(patches.len(), 16);
    let (oy, ox) = (patches[0].y, patches[0].x);
    assert_eq!((oy % 2, ox % 2), (0, 0));
    let mut back = Image::zeros(32, 32, 3);
    for p in &patches {
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    back.set(p.y - oy + y, p.x - ox + x, c, p.image.get(y, x, c));
                }
            }
        }
    }
    assert_eq!(back, img.crop(oy, ox, 32, 32).unwrap());
}

#[test]
fn devices_are_drawn_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, k) = (10_000, 3);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        counts[draw_device(&mut rng, k)] += 1;
    }
    let p = 1.0 / k as f64;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
    }
}

fn with_dataset(f: impl FnOnce(&Dataset)) {
    let dir = tempfile::tempdir().unwrap();
    let m = build_synth_dataset(&small(6, 3.0), dir.path()).unwrap();
    f(&Dataset::load(&m, Split::Train, &load_cfg()).unwrap());
}

#[test]
fn flips_are_involutions_and_fixed_rng_repeats() {
    with_dataset(|ds| {
        assert_eq!(ds.grid.len(), 4);
        for t in 0..ds.grid.len() {
            let s = ds.sample(0, t, 1).unwrap();
            for h in [true, false] {
                let f = s.flipped(h);
                assert_ne!(f, s);
                assert_eq!(f.flipped(h), s);
            }
            assert_eq!(s.flipped(true).flipped(false), s.flipped(false).flipped(true));
        }
        let a = sample_batch(ds, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_batch(ds, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let batch = collate::<f32>(&a, ds.num_devices, None).unwrap();
        assert_eq!(batch.inputs.x4.shape(), [8, 4, 16, 16]);
        assert_eq!(batch.gt.shape(), [8, 3, 32, 32]);
        assert_eq!(batch.mask.shape(), [8, 1, 32, 32]);
        for (row, s) in batch.inputs.weights.data().chunks(3).zip(&a) {
            assert_eq!(row.iter().sum::<f32>(), 1.0);
            assert_eq!(row[s.device], 1.0);
        }
    });
}

#[test]
fn horizontal_flip_keeps_bayer_tiles() {
    with_dataset(|ds| {
        let s = ds.sample(1, 2, 0).unwrap();
        let f = s.flipped(true);
        let w = s.x4.width;
        for y in 0..s.x4.height {
            for x in 0..w {
                assert_eq!(f.x4.pixel(y, w - 1 - x), s.x4.pixel(y, x));
            }
        }
        assert_eq!(f.coords.1 + s.coords.1 + w, s.packed_size.1);
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flip_commutes_with_warp(seed in any::<u64>(), horizontal in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (9, 7);
        let img = Image::new(w, h, 3, (0..w * h * 3).map(|_| rng.random()).collect()).unwrap();
        let flow = smooth_flow(w, h, 2.5, 0.3, seed);
        let (fi, ff): (fn(&Image) -> Image, fn(&metaisp::imageio::FlowField) -> metaisp::imageio::FlowField) =
            if horizontal { (hflip, hflip_flow) } else { (vflip, vflip_flow) };
        let (a, ma) = warp_bilinear(&fi(&img), &ff(&flow)).unwrap();
        let (b, mb) = warp_bilinear(&img, &flow).unwrap();
        let b = fi(&b);
        for (p, q) in a.data.iter().zip(&b.data) {
            prop_assert!((p - q).abs() < 1e-5);
        }
        prop_assert_eq!(ma.data, fi(&mb).data);
    }
}
