use metaisp::color::LUMA_709;
use metaisp::data::{procedural_scene, smooth_scene};
use metaisp::imageio::{encode_ppm, Image, RawImage, RawMeta};
use metaisp::refisp::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn meta(wb: [f64; 4]) -> RawMeta {
    RawMeta { black_level: 64, white_level: 16383, wb_gains: wb, iso: 100.0, exposure_s: 0.01, device_id: Some(0) }
}

/// Same-color sites within one pixel (Chebyshev), with out-of-range sites
/// replaced by the nearest in-range site of the same color.
fn demosaic_oracle(m: &[f32], w: usize, h: usize) -> Vec<[f64; 3]> {
    let color = |y: usize, x: usize| match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    };
    let fold = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * (n - 1) - i as usize
        } else {
            i as usize
        }
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut px = [0.0; 3];
            for (c, v) in px.iter_mut().enumerate() {
                if color(y, x) == c {
                    *v = m[y * w + x] as f64;
                    continue;
                }
                let (mut s, mut n) = (0.0, 0.0);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        // parity decides the color of a virtual site
                        if color(yy.rem_euclid(2) as usize, xx.rem_euclid(2) as usize) == c {
                            s += m[fold(yy, h) * w + fold(xx, w)] as f64;
                            n += 1.0;
                        }
                    }
                }
                *v = s / n;
            }
            out.push(px);
        }
    }
    out
}

#[test]
fn demosaic_single_red_sample_matches_oracle() {
    for (sy, sx) in [(0, 0), (2, 2), (0, 2), (2, 0)] {
        let mut m = vec![0.0f32; 16];
        m[sy * 4 + sx] = 1.0;
        let img = Image::new(4, 4, 1, m.clone()).unwrap();
        let got = demosaic_bilinear(&img).unwrap();
        let want = demosaic_oracle(&m, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert!((got.get(y, x, c) as f64 - want[y * 4 + x][c]).abs() < 1e-7, "site ({sy},{sx}) px ({y},{x}) c{c}");
                }
            }
        }
    }
}

#[test]
fn demosaic_random_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (w, h) = (8, 6);
    let m: Vec<f32> = (0..w * h).map(|_| rng.random()).collect();
    let got = demosaic_bilinear(&Image::new(w, h, 1, m.clone()).unwrap()).unwrap();
    let want = demosaic_oracle(&m, w, h);
    for (i, px) in want.iter().enumerate() {
        for c in 0..3 {
            assert!((got.data[i * 3 + c] as f64 - px[c]).abs() < 1e-6);
        }
    }
}

#[test]
fn wb_matches_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Image::new(3, 2, 4, (0..24).map(|_| rng.random()).collect()).unwrap();
    let gains: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..3.0)).collect();
    let out = apply_wb(&img, &gains).unwrap();
    for i in 0..24 {
        assert_eq!(out.data[i], (img.data[i] as f64 * gains[i % 4]) as f32);
    }
    assert!(apply_wb(&img, &[1.0, 0.0, 1.0, 1.0]).is_err());
    assert_eq!(apply_wb(&img, &[1.0; 4]).unwrap(), img);
}

fn tone_oracle(knots: &[[f64; 2]], v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    let i = knots.iter().position(|k| k[0] >= v).unwrap_or(knots.len() - 1).max(1);
    let (a, b) = (knots[i - 1], knots[i]);
    a[1] + (v - a[0]) * (b[1] - a[1]) / (b[0] - a[0])
}

fn style_oracle(rgb: [f64; 3], s: &StyleParams) -> [f64; 3] {
    let g: Vec<f64> = (0..3).map(|c| rgb[c] * s.gains[c]).collect();
    let m: Vec<f64> = (0..3).map(|r| (0..3).map(|c| s.ccm[r][c] * g[c]).sum()).collect();
    let y: f64 = (0..3).map(|c| LUMA_709[c] * m[c]).sum();
    let mut out = [0.0; 3];
    for c in 0..3 {
        let sat = y + s.saturation * (m[c] - y);
        out[c] = tone_oracle(&s.tone_knots, sat).powf(1.0 / s.gamma).clamp(0.0, 1.0);
    }
    out
}

#[test]
fn style_matches_straight_line_oracle_on_checker() {
    let presets = make_device_styles(3, 5).unwrap();
    let lin: Vec<f32> = metaisp::color::COLOR_CHECKER_LINEAR.iter().flat_map(|p| p.map(|v| v as f32)).collect();
    let img = Image::new(6, 4, 3, lin).unwrap();
    for p in &presets {
        let out = apply_style(&img, &p.style).unwrap();
        for (i, patch) in metaisp::color::COLOR_CHECKER_LINEAR.iter().enumerate() {
            let want = style_oracle(patch.map(|v| v as f32 as f64), &p.style);
            for c in 0..3 {
                assert!((out.image.data[i * 3 + c] as f64 - want[c]).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn luma_preserving_ccm_changes_only_chroma() {
    let base = StyleParams::identity();
    let mut ccm = [[0.8, 0.1, 0.1], [0.05, 0.9, 0.05], [0.1, 0.1, 0.8]];
    let w = LUMA_709;
    let col: Vec<f64> = (0..3).map(|c| (0..3).map(|r| w[r] * ccm[r][c]).sum::<f64>() - w[c]).collect();
    // push the luma drift into the green row so w^T M = w^T; the row sums stay 1
    for c in 0..3 {
        ccm[1][c] -= col[c] / w[1];
    }
    let drift: f64 = ccm[1].iter().sum::<f64>() - 1.0;
    assert!(drift.abs() < 1e-12);
    let tinted = StyleParams { ccm, ..base.clone() };
    tinted.validate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raw = RawImage::new(16, 16, (0..256).map(|_| rng.random_range(2000..9000)).collect(), meta([1.0; 4])).unwrap();
    let (a, b) = (forward_isp(&raw, &base).unwrap(), forward_isp(&raw, &tinted).unwrap());
    let lin = |v: f32| (v as f64).powf(2.2);
    let mut chroma = 0.0f64;
    for (pa, pb) in a.image.data.chunks(3).zip(b.image.data.chunks(3)) {
        let ya: f64 = (0..3).map(|c| w[c] * lin(pa[c])).sum();
        let yb: f64 = (0..3).map(|c| w[c] * lin(pb[c])).sum();
        assert!((ya - yb).abs() < 1e-3, "luma {ya} vs {yb}");
        chroma = chroma.max((0..3).map(|c| (pa[c] - pb[c]).abs() as f64).fold(0.0, f64::max));
    }
    assert!(chroma > 1e-3);
}

fn golden_scene_raw() -> RawImage {
    let scene = procedural_scene(64, 2024);
    inverse_isp(&scene, &StyleParams::identity(), &meta([1.9, 1.0, 1.0, 1.6]), NoiseParams::off(), 0).unwrap()
}

#[test]
fn golden_render_hash_is_pinned() {
    let preset = &make_device_styles(3, 0).unwrap()[0];
    let out = forward_isp(&golden_scene_raw(), &preset.style).unwrap();
    let hex: String = Sha256::digest(encode_ppm(&out)).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, "9d69c036dc5ea302d67508209483a21d2abcc128e3bd1f8ef0e14788d47acedb");
}

#[test]
fn seed_zero_presets_are_separated() {
    let p = make_device_styles(3, 0).unwrap();
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(checker_distance(&p[i], &p[j]).unwrap() >= MIN_STYLE_DISTANCE);
        }
    }
    assert_eq!(p, make_device_styles(3, 0).unwrap());
    assert_ne!(p, make_device_styles(3, 1).unwrap());
}

#[test]
fn inverse_then_forward_round_trips() {
    let presets = make_device_styles(3, 7).unwrap();
    for seed in 0..12 {
        let y = smooth_scene(48, seed, 3.0);
        let style = &presets[seed as usize % 3].style;
        let raw = inverse_isp(&y, style, &meta([2.0, 1.0, 1.0, 1.5]), NoiseParams::off(), seed).unwrap();
        let back = forward_isp(&raw, style).unwrap();
        let (w, h) = (y.width(), y.height());
        let (mut err, mut n) = (0.0, 0.0);
        for r in 2..h - 2 {
            for c in 2..w - 2 {
                for ch in 0..3 {
                    err += (back.image.get(r, c, ch) - y.image.get(r, c, ch)).abs() as f64;
                    n += 1.0;
                }
            }
        }
        assert!(err / n < 1.0 / 255.0, "seed {seed}: mae {}", err / n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn brighter_raw_never_darkens(seed in any::<u64>(), k in 1.0f64..2.0) {
        let presets = make_device_styles(2, seed % 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = RawMeta { black_level: 0, ..meta([1.0; 4]) };
        let mosaic: Vec<u16> = (0..64).map(|_| rng.random_range(0..8000)).collect();
        let brighter: Vec<u16> = mosaic.iter().map(|&v| (v as f64 * k).round() as u16).collect();
        let style = StyleParams { ccm: StyleParams::identity().ccm, saturation: 1.0, ..presets[1].style.clone() };
        let a = forward_isp(&RawImage::new(8, 8, mosaic, m.clone()).unwrap(), &style).unwrap();
        let b = forward_isp(&RawImage::new(8, 8, brighter, m).unwrap(), &style).unwrap();
        for (x, y) in a.image.data.iter().zip(&b.image.data) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn forward_isp_is_deterministic(seed in any::<u64>()) {
        let style = make_device_styles(2, seed % 3).unwrap()[0].style.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = RawImage::new(8, 8, (0..64).map(|_| rng.random_range(64..16383)).collect(), meta([1.5, 1.0, 1.0, 2.0])).unwrap();
        prop_assert_eq!(forward_isp(&raw, &style).unwrap(), forward_isp(&raw, &style).unwrap());
    }
}
