//! 8-bit sRGB ↔ CIE Lab (D65, 2° observer) and the lightness/chroma split.
//!
//! Conversions run in `f64` per pixel and store `f32` channels.

use crate::error::{Error, Result};

/// IEC 61966-2-1 linear sRGB → XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.240_454_2, -1.537_138_5, -0.498_531_4],
    [-0.969_266_0, 1.876_010_8, 0.041_556_0],
    [0.055_643_4, -0.204_025_9, 1.057_225_2],
];

/// D65 reference white as the row sums of [`RGB_TO_XYZ`], so R=G=B maps to a=b=0.
fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

const DELTA: f64 = 6.0 / 29.0;

/// Slack for calling a linear-RGB value out of gamut.
const GAMUT_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Row-major interleaved `R, G, B`.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be at least 1x1, got {height}x{width}")));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(RgbImage { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        RgbImage { height, width, pixels: rgb.iter().copied().cycle().take(height * width * 3).collect() }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    pub l: Vec<f32>,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightnessMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbMap {
    pub height: usize,
    pub width: usize,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

impl AbMap {
    pub fn uniform(height: usize, width: usize, a: f32, b: f32) -> Self {
        AbMap { height, width, a: vec![a; height * width], b: vec![b; height * width] }
    }

    /// Mean `(a, b)` over the pixels where `mask` is set; `None` for an empty mask.
    pub fn masked_mean(&self, mask: &[bool]) -> Option<[f64; 2]> {
        let mut acc = [0.0, 0.0];
        let mut count = 0usize;
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            acc[0] += self.a[i] as f64;
            acc[1] += self.b[i] as f64;
            count += 1;
        }
        (count > 0).then(|| [acc[0] / count as f64, acc[1] / count as f64])
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    m.map(|row| row[0] * v[0] + row[1] * v[1] + row[2] * v[2])
}

/// One 8-bit sRGB triple to `[L, a, b]`.
pub fn srgb_pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let linear = rgb.map(|c| srgb_to_linear(c as f64 / 255.0));
    let xyz = mat_vec(&RGB_TO_XYZ, linear);
    let w = white();
    let fx = lab_f(xyz[0] / w[0]);
    let fy = lab_f(xyz[1] / w[1]);
    let fz = lab_f(xyz[2] / w[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// `[L, a, b]` to unclipped linear RGB.
pub fn lab_pixel_to_linear_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = white();
    let xyz = [lab_f_inv(fx) * w[0], lab_f_inv(fy) * w[1], lab_f_inv(fz) * w[2]];
    mat_vec(&XYZ_TO_RGB, xyz)
}

pub fn in_gamut(lab: [f64; 3]) -> bool {
    lab_pixel_to_linear_rgb(lab).iter().all(|&c| (-GAMUT_EPS..=1.0 + GAMUT_EPS).contains(&c))
}

/// `[L, a, b]` to 8-bit sRGB, clipping in linear RGB. The flag reports clipping.
pub fn lab_pixel_to_srgb(lab: [f64; 3]) -> ([u8; 3], bool) {
    let linear = lab_pixel_to_linear_rgb(lab);
    let clipped = linear.iter().any(|&c| !(-GAMUT_EPS..=1.0 + GAMUT_EPS).contains(&c) || c.is_nan());
    let rgb = linear.map(|c| {
        let c = if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) };
        (linear_to_srgb(c) * 255.0).round().clamp(0.0, 255.0) as u8
    });
    (rgb, clipped)
}

pub fn rgb_to_lab(img: &RgbImage) -> LabImage {
    let n = img.height * img.width;
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.pixels.chunks_exact(3) {
        let lab = srgb_pixel_to_lab([px[0], px[1], px[2]]);
        l.push(lab[0] as f32);
        a.push(lab[1] as f32);
        b.push(lab[2] as f32);
    }
    LabImage { height: img.height, width: img.width, l, a, b }
}

pub fn lab_to_rgb(img: &LabImage) -> RgbImage {
    lab_to_rgb_counted(img).0
}

/// Like [`lab_to_rgb`], also returning how many pixels were clipped into gamut.
pub fn lab_to_rgb_counted(img: &LabImage) -> (RgbImage, usize) {
    let n = img.height * img.width;
    let mut pixels = Vec::with_capacity(n * 3);
    let mut clipped = 0;
    for i in 0..n {
        let (rgb, out) = lab_pixel_to_srgb([img.l[i] as f64, img.a[i] as f64, img.b[i] as f64]);
        clipped += out as usize;
        pixels.extend_from_slice(&rgb);
    }
    (RgbImage { height: img.height, width: img.width, pixels }, clipped)
}

pub fn split_lab(img: &LabImage) -> (LightnessMap, AbMap) {
    (
        LightnessMap { height: img.height, width: img.width, values: img.l.clone() },
        AbMap { height: img.height, width: img.width, a: img.a.clone(), b: img.b.clone() },
    )
}

pub fn merge_lab(l: &LightnessMap, ab: &AbMap) -> Result<LabImage> {
    if (l.height, l.width) != (ab.height, ab.width) {
        return Err(Error::Shape(format!(
            "lightness is {}x{} but ab is {}x{}",
            l.height, l.width, ab.height, ab.width
        )));
    }
    Ok(LabImage { height: l.height, width: l.width, l: l.values.clone(), a: ab.a.clone(), b: ab.b.clone() })
}

/// Scales `(a, b)` toward zero until the color is in gamut, keeping `L`.
/// Grey (`a = b = 0`) is in gamut for every `L` in `[0, 100]`.
pub fn fit_chroma(lab: [f64; 3]) -> [f64; 3] {
    let l = lab[0].clamp(0.0, 100.0);
    if in_gamut([l, lab[1], lab[2]]) {
        return [l, lab[1], lab[2]];
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if in_gamut([l, lab[1] * mid, lab[2] * mid]) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    [l, lab[1] * lo, lab[2] * lo]
}

/// Like [`lab_to_rgb`], but brings out-of-gamut pixels into gamut by reducing
/// chroma rather than clipping, so lightness survives the conversion.
pub fn lab_to_rgb_preserving_lightness(img: &LabImage) -> RgbImage {
    let n = img.height * img.width;
    let mut pixels = Vec::with_capacity(n * 3);
    for i in 0..n {
        let lab = fit_chroma([img.l[i] as f64, img.a[i] as f64, img.b[i] as f64]);
        pixels.extend_from_slice(&lab_pixel_to_srgb(lab).0);
    }
    RgbImage { height: img.height, width: img.width, pixels }
}

/// Greyscale rendering of a lightness map (ab = 0).
pub fn lightness_to_rgb(l: &LightnessMap) -> RgbImage {
    let ab = AbMap::uniform(l.height, l.width, 0.0, 0.0);
    lab_to_rgb(&merge_lab(l, &ab).expect("matching shapes"))
}
