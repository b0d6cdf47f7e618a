use std::path::Path;

use metaisp::imageio::*;
use metaisp_autograd::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn meta(bl: u16, wl: u16) -> RawMeta {
    RawMeta { black_level: bl, white_level: wl, wb_gains: [2.0, 1.0, 1.0, 1.5], iso: 200.0, exposure_s: 0.01, device_id: Some(0) }
}

fn random_raw(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RawImage {
    let m = meta(64, 16383);
    let mosaic = (0..w * h).map(|_| rng.random_range(0..=m.white_level)).collect();
    RawImage::new(w, h, mosaic, m).unwrap()
}

#[test]
fn seeded_raw_file_hash_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seed7.pgm");
    let raw = random_raw(&mut ChaCha8Rng::seed_from_u64(7), 64, 64);
    write_raw(&raw, &path).unwrap();
    let pgm = std::fs::read(&path).unwrap();
    let sidecar = std::fs::read(sidecar_path(&path)).unwrap();
    assert_eq!(sha256_hex(&pgm), "0f2674be561c56a0fdbd0b5b3ea0810afc4cb8cd4ceac4f30f6e0c59dcbfd7b4");
    assert_eq!(sha256_hex(&sidecar), "e5e99f2bd56a175e26cb10a6a7331a9d8f52ab7bac0e6b106c2bb5f037c45d61");
}

#[test]
fn pack_matches_index_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = meta(10, 1000);
    let mosaic: Vec<u16> = (0..36).map(|_| rng.random_range(0..=1000)).collect();
    let raw = RawImage::new(6, 6, mosaic.clone(), m).unwrap();
    let packed = pack_rggb(&raw).unwrap();
    assert_eq!((packed.width, packed.height, packed.channels), (3, 3, 4));
    for i in 0..3 {
        for j in 0..3 {
            let sites = [(2 * i, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1)];
            for (c, (y, x)) in sites.iter().enumerate() {
                let v = mosaic[y * 6 + x] as f64;
                let want = ((v - 10.0) / 990.0).clamp(0.0, 1.0) as f32;
                assert_eq!(packed.get(i, j, c), want);
            }
        }
    }
}

#[test]
fn rgb_storage_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = RgbImage::srgb(7, 5, (0..105).map(|_| rng.random::<f32>()).collect()).unwrap();
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    write_rgb(&img, &a).unwrap();
    write_rgb(&read_rgb(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn half_rounds_up_to_128() {
    assert_eq!(to_byte(0.5), 128);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("h.ppm");
    write_rgb(&RgbImage::srgb(1, 1, vec![0.5; 3]).unwrap(), &p).unwrap();
    assert_eq!(read_rgb(&p).unwrap().image.get(0, 0, 0), 128.0 / 255.0);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint {
        tensors: vec![
            ("a".into(), Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, 7.0]).unwrap()),
            ("b.c".into(), Tensor::new(&[4], vec![0.25; 4]).unwrap()),
        ],
        config: serde_json::json!({"k": 1}),
        rng_state: serde_json::json!({"seed": "00"}),
    };
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&ck, &a).unwrap();
    let back = load_checkpoint(&a).unwrap();
    assert_eq!(back, ck);
    save_checkpoint(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn manifest_paths_resolve_beside_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let rec = |scene: &str, device: u32| ManifestRecord {
        scene_id: scene.into(),
        device_id: device,
        raw_path: format!("{scene}/raw.pgm"),
        rgb_path: format!("{scene}/gt_d{device}.ppm"),
        flow_path: None,
        split: Split::Train,
        wb_dg: None,
    };
    let m = Manifest { root: dir.path().to_path_buf(), records: vec![rec("s0", 0), rec("s0", 1)] };
    let path = dir.path().join("manifest.jsonl");
    write_manifest(&m, &path).unwrap();
    let back = read_manifest(&path).unwrap();
    assert_eq!(back.records, m.records);
    assert_eq!(back.resolve("s0/raw.pgm"), dir.path().join("s0/raw.pgm"));
}

fn raw_strategy() -> impl Strategy<Value = RawImage> {
    (1usize..6, 1usize..6, 0u16..200, 300u16..16383, any::<u64>()).prop_map(|(hw, hh, bl, wl, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (2 * hw, 2 * hh);
        let m = RawMeta {
            black_level: bl,
            white_level: wl,
            wb_gains: [rng.random_range(0.5..3.0), 1.0, 1.0, rng.random_range(0.5..3.0)],
            iso: rng.random_range(50.0..3200.0),
            exposure_s: rng.random_range(1e-4..0.5),
            device_id: if seed % 2 == 0 { Some((seed % 7) as u32) } else { None },
        };
        let mosaic = (0..w * h).map(|_| rng.random_range(0..=wl)).collect();
        RawImage::new(w, h, mosaic, m).unwrap()
    })
}

fn write_read<T>(write: impl Fn(&T, &Path), read: impl Fn(&Path) -> T, v: &T, name: &str) -> T {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join(name);
    write(v, &p);
    read(&p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raw_round_trips(raw in raw_strategy()) {
        let back = write_read(|r, p| write_raw(r, p).unwrap(), |p| read_raw(p).unwrap(), &raw, "r.pgm");
        prop_assert_eq!(back, raw);
    }

    #[test]
    fn rgb_bytes_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.random_range(0u8..=255) as f32 / 255.0).collect();
        let img = RgbImage::srgb(w, h, data).unwrap();
        let back = write_read(|r, p| write_rgb(r, p).unwrap(), |p| read_rgb(p).unwrap(), &img, "i.ppm");
        prop_assert_eq!(back, img);
    }

    #[test]
    fn flow_round_trips(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = w * h;
        let f = FlowField { width: w, height: h, u: (0..n).map(|_| rng.random_range(-50.0..50.0)).collect(), v: (0..n).map(|_| rng.random_range(-50.0..50.0)).collect() };
        let back = write_read(|r, p| write_flow(r, p).unwrap(), |p| read_flow(p).unwrap(), &f, "f.flo");
        prop_assert_eq!(back, f);
    }

    #[test]
    fn pack_is_linear_without_black_level(seed in any::<u64>(), a in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = RawMeta { black_level: 0, ..meta(0, 16383) };
        let mosaic: Vec<u16> = (0..16).map(|_| rng.random_range(0..=16383)).collect();
        let scaled: Vec<u16> = mosaic.iter().map(|&v| (v as f64 * a).round() as u16).collect();
        let p = pack_rggb(&RawImage::new(4, 4, mosaic.clone(), m.clone()).unwrap()).unwrap();
        let q = pack_rggb(&RawImage::new(4, 4, scaled.clone(), m).unwrap()).unwrap();
        for i in 0..16 {
            let want = a as f32 * p.data[i];
            prop_assert!((q.data[i] - want).abs() <= 0.5 / 16383.0 + 1e-6);
        }
    }
}
