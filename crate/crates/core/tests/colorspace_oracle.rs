//! Lattice sweep against a scalar double-precision sRGB → Lab oracle.

use lang2color::colorspace::{lab_pixel_to_srgb, lab_to_rgb, rgb_to_lab, srgb_pixel_to_lab, RgbImage};

/// Textbook conversion with the tabulated D65 white.
fn oracle_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(|c| {
        let c = c as f64 / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    });
    let x = 0.4124564 * lin[0] + 0.3575761 * lin[1] + 0.1804375 * lin[2];
    let y = 0.2126729 * lin[0] + 0.7151522 * lin[1] + 0.0721750 * lin[2];
    let z = 0.0193339 * lin[0] + 0.1191920 * lin[1] + 0.9503041 * lin[2];
    let f = |t: f64| {
        let e = 216.0 / 24389.0;
        let k = 24389.0 / 27.0;
        if t > e {
            t.cbrt()
        } else {
            (k * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn lattice() -> Vec<[u8; 3]> {
    let levels: Vec<u8> = (0..17).map(|i| (i * 255 / 16) as u8).collect();
    let mut out = Vec::new();
    for &r in &levels {
        for &g in &levels {
            for &b in &levels {
                out.push([r, g, b]);
            }
        }
    }
    out
}

#[test]
fn lattice_agrees_with_oracle() {
    for rgb in lattice() {
        let got = srgb_pixel_to_lab(rgb);
        let want = oracle_lab(rgb);
        for k in 0..3 {
            // the oracle's rounded white point shifts a and b by well under 0.01
            assert!((got[k] - want[k]).abs() < 1e-2, "{rgb:?}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn lattice_round_trip_within_one_level() {
    let points = lattice();
    let img = RgbImage::new(1, points.len(), points.concat()).unwrap();
    let back = lab_to_rgb(&rgb_to_lab(&img));
    let worst = img.pixels.iter().zip(&back.pixels).map(|(&x, &y)| (x as i32 - y as i32).abs()).max().unwrap();
    assert!(worst <= 1, "max channel error {worst}");
}

#[test]
fn grey_anchor_matches_oracle() {
    let got = srgb_pixel_to_lab([128, 128, 128]);
    let want = oracle_lab([128, 128, 128]);
    assert!((got[0] - want[0]).abs() < 1e-3, "{got:?} vs {want:?}");
    assert!((want[0] - 53.6).abs() < 0.05);
    assert!(got[1].abs() < 1e-3 && got[2].abs() < 1e-3);
    assert_eq!(lab_pixel_to_srgb([100.0, 0.0, 0.0]).0, [255, 255, 255]);
}
