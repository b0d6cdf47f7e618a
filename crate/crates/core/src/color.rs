//! Color-science helpers: sRGB transfer curves, CIE XYZ/L*a*b* under D65 and
//! the CIEDE2000 color difference.

/// Rec.709 / sRGB luma weights on linear RGB.
pub const LUMA_709: [f64; 3] = [0.2126, 0.7152, 0.0722];

/// D65 reference white (Y = 1).
const WHITE_D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

pub fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn luma(rgb: [f64; 3]) -> f64 {
    LUMA_709[0] * rgb[0] + LUMA_709[1] * rgb[1] + LUMA_709[2] * rgb[2]
}

pub fn linear_rgb_to_xyz(rgb: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (o, row) in out.iter_mut().zip(SRGB_TO_XYZ.iter()) {
        *o = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
    }
    out
}

pub fn xyz_to_lab(xyz: [f64; 3]) -> [f64; 3] {
    const EPS: f64 = 216.0 / 24389.0;
    const KAPPA: f64 = 24389.0 / 27.0;
    let f = |t: f64| if t > EPS { t.cbrt() } else { (KAPPA * t + 16.0) / 116.0 };
    let fx = f(xyz[0] / WHITE_D65[0]);
    let fy = f(xyz[1] / WHITE_D65[1]);
    let fz = f(xyz[2] / WHITE_D65[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// sRGB-encoded `[0, 1]` triple to CIELAB (D65).
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = [srgb_to_linear(rgb[0]), srgb_to_linear(rgb[1]), srgb_to_linear(rgb[2])];
    xyz_to_lab(linear_rgb_to_xyz(lin))
}

/// CIEDE2000 with `kL = kC = kH = 1`.
pub fn ciede2000(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    use std::f64::consts::PI;
    let [l1, a1, b1] = lab1;
    let [l2, a2, b2] = lab2;
    let c1 = a1.hypot(b1);
    let c2 = a2.hypot(b2);
    let c_bar = 0.5 * (c1 + c2);
    let c7 = c_bar.powi(7);
    let g = 0.5 * (1.0 - (c7 / (c7 + 25f64.powi(7))).sqrt());
    let a1p = (1.0 + g) * a1;
    let a2p = (1.0 + g) * a2;
    let c1p = a1p.hypot(b1);
    let c2p = a2p.hypot(b2);
    let hue = |b: f64, a: f64| {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            let h = b.atan2(a).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(b1, a1p);
    let h2p = hue(b2, a2p);

    let dl = l2 - l1;
    let dc = c2p - c1p;
    let dh_angle = if c1p * c2p == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh = 2.0 * (c1p * c2p).sqrt() * (dh_angle.to_radians() / 2.0).sin();

    let l_bar = 0.5 * (l1 + l2);
    let cp_bar = 0.5 * (c1p + c2p);
    let hp_bar = if c1p * c2p == 0.0 {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        0.5 * (h1p + h2p)
    } else if h1p + h2p < 360.0 {
        0.5 * (h1p + h2p + 360.0)
    } else {
        0.5 * (h1p + h2p - 360.0)
    };
    let t = 1.0 - 0.17 * (hp_bar - 30.0).to_radians().cos()
        + 0.24 * (2.0 * hp_bar).to_radians().cos()
        + 0.32 * (3.0 * hp_bar + 6.0).to_radians().cos()
        - 0.20 * (4.0 * hp_bar - 63.0).to_radians().cos();
    let d_theta = 30.0 * (-((hp_bar - 275.0) / 25.0).powi(2)).exp();
    let cp7 = cp_bar.powi(7);
    let rc = 2.0 * (cp7 / (cp7 + 25f64.powi(7))).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let sl = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let sc = 1.0 + 0.045 * cp_bar;
    let sh = 1.0 + 0.015 * cp_bar * t;
    let rt = -(2.0 * d_theta * PI / 180.0).sin() * rc;
    let (tl, tc, th) = (dl / sl, dc / sc, dh / sh);
    (tl * tl + tc * tc + th * th + rt * tc * th).sqrt()
}

/// 24-patch synthetic color checker in linear RGB, modeled on the classic
/// chart layout (dark skin, light skin, ... , black).
pub const COLOR_CHECKER_LINEAR: [[f64; 3]; 24] = [
    [0.173, 0.085, 0.058],
    [0.553, 0.311, 0.223],
    [0.117, 0.196, 0.337],
    [0.105, 0.150, 0.057],
    [0.238, 0.222, 0.436],
    [0.128, 0.515, 0.411],
    [0.741, 0.201, 0.025],
    [0.069, 0.106, 0.385],
    [0.557, 0.084, 0.115],
    [0.107, 0.041, 0.140],
    [0.338, 0.502, 0.046],
    [0.789, 0.356, 0.022],
    [0.030, 0.048, 0.287],
    [0.067, 0.293, 0.064],
    [0.449, 0.030, 0.040],
    [0.861, 0.578, 0.010],
    [0.505, 0.085, 0.290],
    [0.000, 0.243, 0.372],
    [0.879, 0.880, 0.856],
    [0.582, 0.587, 0.585],
    [0.357, 0.363, 0.365],
    [0.189, 0.192, 0.194],
    [0.087, 0.090, 0.092],
    [0.031, 0.032, 0.034],
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_curve_round_trips() {
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            assert!((linear_to_srgb(srgb_to_linear(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn white_maps_to_l100() {
        let lab = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((lab[0] - 100.0).abs() < 1e-3, "{lab:?}");
        assert!(lab[1].abs() < 0.01 && lab[2].abs() < 0.01, "{lab:?}");
        assert_eq!(srgb_to_lab([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn ciede2000_is_symmetric_and_zero_on_identity() {
        let a = [50.0, 2.6772, -79.7751];
        let b = [50.0, 0.0, -82.7485];
        assert_eq!(ciede2000(a, a), 0.0);
        assert!((ciede2000(a, b) - ciede2000(b, a)).abs() < 1e-12);
    }
}
