//! The ab classification grid and class-rebalancing weights.
//!
//! Labels are laid out a-major: `label = idx_a · bins + idx_b`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::colorspace::AbMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub ab_min: f64,
    pub ab_max: f64,
    pub bins_per_axis: usize,
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        QuantizerSpec { ab_min: -110.0, ab_max: 110.0, bins_per_axis: 25 }
    }
}

/// Per-pixel class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

/// Pixel-major scores: `data[(y·width + x)·num_labels + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub height: usize,
    pub width: usize,
    pub num_labels: usize,
    pub data: Vec<f32>,
}

impl Logits {
    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.num_labels..(i + 1) * self.num_labels]
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Large margin at `labels`, zero elsewhere.
    pub fn one_hot(labels: &LabelMap, num_labels: usize, margin: f32) -> Self {
        let mut data = vec![0.0; labels.labels.len() * num_labels];
        for (i, &l) in labels.labels.iter().enumerate() {
            data[i * num_labels + l as usize] = margin;
        }
        Logits { height: labels.height, width: labels.width, num_labels, data }
    }
}

impl QuantizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ab_min.is_finite() && self.ab_max.is_finite() && self.ab_min < self.ab_max) {
            return Err(Error::InvalidInput(format!("grid bounds [{}, {}] are not increasing", self.ab_min, self.ab_max)));
        }
        if self.bins_per_axis == 0 {
            return Err(Error::InvalidInput("bins_per_axis must be at least 1".into()));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.ab_max - self.ab_min) / self.bins_per_axis as f64
    }

    pub fn num_labels(&self) -> usize {
        self.bins_per_axis * self.bins_per_axis
    }

    fn axis_index(&self, x: f64) -> usize {
        let t = (x - self.ab_min) * self.bins_per_axis as f64 / (self.ab_max - self.ab_min);
        (t.floor().max(0.0) as usize).min(self.bins_per_axis - 1)
    }

    fn axis_centroid(&self, idx: usize) -> f64 {
        self.ab_min + (2 * idx + 1) as f64 * (self.ab_max - self.ab_min) / (2 * self.bins_per_axis) as f64
    }

    /// Values outside the grid clamp to the edge bins.
    pub fn quantize_ab(&self, a: f64, b: f64) -> Result<u32> {
        if a.is_nan() || b.is_nan() {
            return Err(Error::InvalidValue(format!("cannot quantize NaN ab pair ({a}, {b})")));
        }
        Ok((self.axis_index(a) * self.bins_per_axis + self.axis_index(b)) as u32)
    }

    /// Bin centroid of `label`.
    pub fn dequantize_label(&self, label: u32) -> Result<(f64, f64)> {
        let label = label as usize;
        if label >= self.num_labels() {
            return Err(Error::Index { index: label, limit: self.num_labels() });
        }
        Ok((self.axis_centroid(label / self.bins_per_axis), self.axis_centroid(label % self.bins_per_axis)))
    }

    pub fn quantize_image(&self, ab: &AbMap) -> Result<LabelMap> {
        let mut labels = Vec::with_capacity(ab.a.len());
        for (i, (&a, &b)) in ab.a.iter().zip(&ab.b).enumerate() {
            if a.is_nan() || b.is_nan() {
                return Err(Error::InvalidValue(format!(
                    "NaN ab value at pixel (row {}, col {})",
                    i / ab.width,
                    i % ab.width
                )));
            }
            labels.push(self.quantize_ab(a as f64, b as f64)?);
        }
        Ok(LabelMap { height: ab.height, width: ab.width, labels })
    }

    /// Argmax per pixel (ties go to the smaller label), rendered as the bin centroid.
    pub fn decode_logits(&self, logits: &Logits) -> AbMap {
        let n = logits.pixels();
        let mut out = AbMap::uniform(logits.height, logits.width, 0.0, 0.0);
        for i in 0..n {
            let label = argmax(logits.pixel(i));
            let (a, b) = self.dequantize_label(label as u32).expect("argmax is in range");
            out.a[i] = a as f32;
            out.b[i] = b as f32;
        }
        out
    }

    pub fn decode_labels(&self, labels: &LabelMap) -> Result<AbMap> {
        let mut out = AbMap::uniform(labels.height, labels.width, 0.0, 0.0);
        for (i, &l) in labels.labels.iter().enumerate() {
            let (a, b) = self.dequantize_label(l)?;
            out.a[i] = a as f32;
            out.b[i] = b as f32;
        }
        Ok(out)
    }
}

/// First index of the maximum.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = k;
        }
    }
    best
}

/// Inverse-frequency class weights, normalized so `Σ freq_c · w_c = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub weights: Vec<f64>,
    pub epsilon: f64,
    pub source_histogram: Vec<u64>,
}

/// Default smoothing: 1e-3 of the uniform frequency.
pub fn default_epsilon(num_labels: usize) -> f64 {
    1e-3 / num_labels as f64
}

pub fn label_histogram<'a>(maps: impl IntoIterator<Item = &'a LabelMap>, num_labels: usize) -> Vec<u64> {
    let mut hist = vec![0u64; num_labels];
    for m in maps {
        for &l in &m.labels {
            hist[l as usize] += 1;
        }
    }
    hist
}

/// `w_c ∝ 1 / (freq_c + epsilon)`; with `epsilon = 0`, unseen classes get weight 0.
pub fn compute_rebalancing_weights(hist: &[u64], epsilon: f64) -> Result<WeightTable> {
    let total: u64 = hist.iter().sum();
    if hist.is_empty() || total == 0 {
        return Err(Error::InvalidInput("histogram is empty".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidInput(format!("epsilon must be a finite non-negative number, got {epsilon}")));
    }
    let freq: Vec<f64> = hist.iter().map(|&c| c as f64 / total as f64).collect();
    let raw: Vec<f64> = freq.iter().map(|&f| if f + epsilon > 0.0 { 1.0 / (f + epsilon) } else { 0.0 }).collect();
    let z: f64 = freq.iter().zip(&raw).map(|(f, w)| f * w).sum();
    Ok(WeightTable { weights: raw.iter().map(|w| w / z).collect(), epsilon, source_histogram: hist.to_vec() })
}

impl WeightTable {
    pub fn expected_weight(&self) -> f64 {
        let total: u64 = self.source_histogram.iter().sum();
        self.source_histogram.iter().zip(&self.weights).map(|(&c, w)| c as f64 / total as f64 * w).sum()
    }

    pub fn uniform(num_labels: usize) -> Self {
        WeightTable { weights: vec![1.0; num_labels], epsilon: 0.0, source_histogram: vec![1; num_labels] }
    }
}

/// Standalone inspection file: the grid plus its weight vector.
#[derive(Debug, Serialize, Deserialize)]
pub struct QuantizerReport {
    pub spec: QuantizerSpec,
    pub weights: WeightTable,
}

pub fn write_quantizer_report(path: &Path, spec: &QuantizerSpec, weights: &WeightTable) -> Result<()> {
    let report = QuantizerReport { spec: *spec, weights: weights.clone() };
    std::fs::write(path, serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}
