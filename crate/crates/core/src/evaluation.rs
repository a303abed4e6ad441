//! Top-k accuracy in quantized ab space, the automated caption-manipulation
//! check, and activation heatmaps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::colorspace::{AbMap, LightnessMap};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::imageio::{write_grey_png, GreyImage};
use crate::model::ColorizationModel;
use crate::nn::film::FeatureMap;
use crate::nn::Float;
use crate::quantizer::{LabelMap, Logits, QuantizerSpec};
use crate::text::lexicon::{swap_color_word, ColorLexicon};

/// Blocks whose heatmaps are exported unless asked otherwise (1-based).
pub const DEFAULT_HEATMAP_BLOCKS: [usize; 3] = [6, 7, 8];

/// Whether `target` ranks among the `k` highest scores. A label outranks the
/// target when its score is higher, or equal with a smaller index.
pub fn in_top_k(scores: &[f32], target: usize, k: usize) -> bool {
    let t = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .take(k)
        .count();
    ahead < k
}

/// `(hits, counted)` over the pixels selected by `mask` (all pixels if `None`).
pub fn top_k_hits(logits: &Logits, targets: &LabelMap, k: usize, mask: Option<&[bool]>) -> Result<(usize, usize)> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if (logits.height, logits.width) != (targets.height, targets.width) {
        return Err(Error::Shape(format!(
            "logits are {}×{} but targets are {}×{}",
            logits.height, logits.width, targets.height, targets.width
        )));
    }
    if let Some(m) = mask {
        if m.len() != targets.labels.len() {
            return Err(Error::Shape("mask size differs from the label map".into()));
        }
    }
    let mut hits = 0;
    let mut counted = 0;
    for (p, &label) in targets.labels.iter().enumerate() {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        if label as usize >= logits.num_labels {
            return Err(Error::Index { index: label as usize, limit: logits.num_labels });
        }
        counted += 1;
        hits += in_top_k(logits.pixel(p), label as usize, k) as usize;
    }
    Ok((hits, counted))
}

/// Fraction of pixels whose target is among the `k` largest logits.
pub fn topk_accuracy(logits: &Logits, targets: &LabelMap, k: usize) -> Result<f64> {
    let (hits, n) = top_k_hits(logits, targets, k, None)?;
    Ok(if n == 0 { 0.0 } else { hits as f64 / n as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub acc1: f64,
    pub acc5: f64,
    /// Top-1 accuracy inside the object mask.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region_acc1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub dataset_id: String,
    pub acc1: f64,
    pub acc5: f64,
    /// Pooled top-1 accuracy over all masked pixels, when masks exist.
    pub region_acc1: Option<f64>,
    pub region_pixels: usize,
    pub images: Vec<ImageMetrics>,
}

/// Pooled accuracies over `samples`, each paired with its first caption.
pub fn evaluate<T: Float>(
    model: &ColorizationModel<T>,
    samples: &[Sample],
    dataset_quantizer: &QuantizerSpec,
    model_id: &str,
    dataset_id: &str,
) -> Result<EvalReport> {
    if *dataset_quantizer != model.quantizer {
        return Err(Error::Config("dataset labels were built with a different quantizer than the model's".into()));
    }
    let (mut h1, mut h5, mut total, mut rh, mut rn) = (0, 0, 0, 0, 0);
    let mut images = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(16) {
        let ls: Vec<&LightnessMap> = chunk.iter().map(|s| &s.lightness).collect();
        let caps: Vec<&str> = chunk.iter().map(|s| s.captions.first().map(String::as_str).unwrap_or("")).collect();
        for (s, pred) in chunk.iter().zip(model.predict_batch(&ls, &caps)?) {
            let (a1, n) = top_k_hits(&pred.logits, &s.labels, 1, None)?;
            let (a5, _) = top_k_hits(&pred.logits, &s.labels, 5, None)?;
            let region = match &s.mask {
                Some(m) => {
                    let (hits, count) = top_k_hits(&pred.logits, &s.labels, 1, Some(m))?;
                    rh += hits;
                    rn += count;
                    (count > 0).then(|| hits as f64 / count as f64)
                }
                None => None,
            };
            h1 += a1;
            h5 += a5;
            total += n;
            let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
            images.push(ImageMetrics { id: s.id.clone(), acc1: frac(a1), acc5: frac(a5), region_acc1: region });
        }
    }
    let frac = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(EvalReport {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        acc1: frac(h1, total),
        acc5: frac(h5, total),
        region_acc1: (rn > 0).then(|| frac(rh, rn)),
        region_pixels: rn,
        images,
    })
}

/// Anything that maps (lightness, caption) to an ab map at output resolution.
pub trait AbPredictor {
    fn predict_ab(&self, lightness: &LightnessMap, captions: &[String]) -> Result<Vec<AbMap>>;
}

impl<T: Float> AbPredictor for ColorizationModel<T> {
    fn predict_ab(&self, lightness: &LightnessMap, captions: &[String]) -> Result<Vec<AbMap>> {
        let ls = vec![lightness; captions.len()];
        Ok(self.predict_batch(&ls, captions)?.into_iter().map(|p| p.ab).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationVariant {
    pub word: String,
    pub caption: String,
    /// Mean predicted `(a, b)` inside the mask.
    pub mean_ab: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationRecord {
    pub image_id: String,
    pub mask_height: usize,
    pub mask_width: usize,
    pub mask: Vec<bool>,
    pub base_caption: String,
    pub variants: Vec<ManipulationVariant>,
    /// `None` when the record was skipped.
    pub success: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

/// Every variant's mean ab must be strictly nearest to its own word's
/// canonical point among the canonical points of all tested words.
pub fn manipulation_success(variants: &[ManipulationVariant], lexicon: &ColorLexicon) -> Result<bool> {
    let points: Vec<[f64; 2]> = variants
        .iter()
        .map(|v| lexicon.get(&v.word).map(|e| e.ab).ok_or_else(|| Error::InvalidInput(format!("{:?} is not a color word", v.word))))
        .collect::<Result<_>>()?;
    let dist = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).hypot(p[1] - q[1]);
    Ok(variants.iter().enumerate().all(|(i, v)| {
        let own = dist(v.mean_ab, points[i]);
        points.iter().enumerate().filter(|&(j, _)| variants[j].word != v.word).all(|(_, &p)| own < dist(v.mean_ab, p))
    }))
}

/// Recolors one image under caption variants and scores the result.
#[allow(clippy::too_many_arguments)]
pub fn manipulation_eval<P: AbPredictor + ?Sized>(
    model: &P,
    image_id: &str,
    lightness: &LightnessMap,
    mask: &[bool],
    mask_size: (usize, usize),
    base_caption: &str,
    color_words: &[String],
    lexicon: &ColorLexicon,
) -> Result<ManipulationRecord> {
    let (mask_height, mask_width) = mask_size;
    if mask.len() != mask_height * mask_width || !mask.contains(&true) {
        return Err(Error::InvalidInput(format!("object mask of {image_id} is empty or mis-sized")));
    }
    let mut words: Vec<String> = Vec::new();
    for w in color_words {
        if !words.contains(w) {
            words.push(w.clone());
        }
    }
    if words.len() < 2 {
        return Err(Error::InvalidInput("manipulation needs at least two distinct color words".into()));
    }
    let mut record = ManipulationRecord {
        image_id: image_id.to_string(),
        mask_height,
        mask_width,
        mask: mask.to_vec(),
        base_caption: base_caption.to_string(),
        variants: Vec::new(),
        success: None,
        skipped: None,
    };
    let mut captions = Vec::with_capacity(words.len());
    for w in &words {
        let swapped = swap_color_word(base_caption, w, lexicon)?;
        if !swapped.had_color_word() {
            record.skipped = Some("base caption has no color word".into());
            return Ok(record);
        }
        captions.push(swapped.text);
    }
    let maps = model.predict_ab(lightness, &captions)?;
    for ((word, caption), ab) in words.into_iter().zip(captions).zip(maps) {
        if (ab.height, ab.width) != (mask_height, mask_width) {
            return Err(Error::Shape(format!("prediction is {}×{}, mask is {mask_height}×{mask_width}", ab.height, ab.width)));
        }
        let mean_ab = ab.masked_mean(mask).expect("mask is non-empty");
        record.variants.push(ManipulationVariant { word, caption, mean_ab });
    }
    record.success = Some(manipulation_success(&record.variants, lexicon)?);
    Ok(record)
}

/// Channel mean, min-max scaled to `0..=255`; constant maps give all zeros.
pub fn activation_heatmap<T: Float>(z: &FeatureMap<T>) -> GreyImage {
    let plane = z.height * z.width;
    let mut mean = vec![0f64; plane];
    for c in 0..z.channels {
        for (m, v) in mean.iter_mut().zip(&z.values[c * plane..(c + 1) * plane]) {
            *m += v.to_f64().unwrap_or(0.0);
        }
    }
    let channels = z.channels.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= channels);
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        mean.iter().map(|&m| ((m - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    } else {
        vec![0; plane]
    };
    GreyImage { height: z.height, width: z.width, pixels }
}

/// Writes `{image_id}_block{n}.png` for each requested 1-based block.
pub fn write_heatmaps<T: Float>(
    dir: &Path,
    image_id: &str,
    features: &[FeatureMap<T>],
    blocks: &[usize],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    blocks
        .iter()
        .map(|&b| {
            let z = b
                .checked_sub(1)
                .and_then(|i| features.get(i))
                .ok_or(Error::Index { index: b, limit: features.len() })?;
            let path = dir.join(format!("{image_id}_block{b}.png"));
            write_grey_png(&path, &activation_heatmap(z))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logits(h: usize, w: usize, k: usize, data: Vec<f32>) -> Logits {
        Logits { height: h, width: w, num_labels: k, data }
    }

    #[test]
    fn topk_examples() {
        let l = logits(1, 1, 4, vec![0.1, 0.5, 0.2, 0.2]);
        let t = LabelMap { height: 1, width: 1, labels: vec![1] };
        assert_eq!(topk_accuracy(&l, &t, 1).unwrap(), 1.0);
        // ties: label 2 outranks label 3
        let t3 = LabelMap { height: 1, width: 1, labels: vec![3] };
        assert_eq!(topk_accuracy(&l, &t3, 2).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&l, &t3, 3).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&l, &t3, 4).unwrap(), 1.0);
        assert!(topk_accuracy(&l, &t, 0).is_err());
    }

    #[test]
    fn heatmap_examples() {
        let z = FeatureMap::new(2, 2, 1, vec![0.0f32, 2.0, 4.0, 8.0]).unwrap();
        assert_eq!(activation_heatmap(&z).pixels, vec![0, 64, 128, 255]);
        let flat = FeatureMap::filled(3, 3, 4, 1.5f32);
        assert_eq!(activation_heatmap(&flat).pixels, vec![0; 9]);
        // mean over two channels
        let z = FeatureMap::new(1, 2, 2, vec![0.0f64, 4.0, 2.0, 8.0]).unwrap();
        assert_eq!(activation_heatmap(&z).pixels, vec![0, 255]);
    }

    struct Perfect<'a>(&'a ColorLexicon);
    impl AbPredictor for Perfect<'_> {
        fn predict_ab(&self, l: &LightnessMap, captions: &[String]) -> Result<Vec<AbMap>> {
            Ok(captions
                .iter()
                .map(|c| {
                    let ab = self.0.get(&self.0.find_in(c).unwrap()).unwrap().ab;
                    AbMap::uniform(l.height, l.width, ab[0] as f32, ab[1] as f32)
                })
                .collect())
        }
    }

    struct Constant;
    impl AbPredictor for Constant {
        fn predict_ab(&self, l: &LightnessMap, captions: &[String]) -> Result<Vec<AbMap>> {
            Ok(vec![AbMap::uniform(l.height, l.width, 30.0, 20.0); captions.len()])
        }
    }

    #[test]
    fn manipulation_oracles() {
        let lex = ColorLexicon::default();
        let l = LightnessMap { height: 2, width: 2, values: vec![50.0; 4] };
        let mask = [true, false, true, true];
        let words: Vec<String> = ["red", "green", "blue"].map(String::from).to_vec();
        let rec = manipulation_eval(&Perfect(&lex), "x", &l, &mask, (2, 2), "a blue car", &words, &lex).unwrap();
        assert_eq!(rec.success, Some(true));
        assert_eq!(rec.variants[1].caption, "a green car");
        let rec = manipulation_eval(&Constant, "x", &l, &mask, (2, 2), "a blue car", &words, &lex).unwrap();
        assert_eq!(rec.success, Some(false));
        let rec = manipulation_eval(&Constant, "x", &l, &mask, (2, 2), "a car", &words, &lex).unwrap();
        assert_eq!(rec.success, None);
        assert!(rec.skipped.is_some());
    }

    #[test]
    fn success_ignores_variant_order() {
        let lex = ColorLexicon::default();
        let v = |w: &str, ab: [f64; 2]| ManipulationVariant { word: w.into(), caption: String::new(), mean_ab: ab };
        let red = lex.get("red").unwrap().ab;
        let blue = lex.get("blue").unwrap().ab;
        let mut vs = vec![v("red", red), v("blue", [blue[0] + 5.0, blue[1]]), v("green", [0.0, 0.0])];
        let a = manipulation_success(&vs, &lex).unwrap();
        vs.reverse();
        assert_eq!(a, manipulation_success(&vs, &lex).unwrap());
    }

    proptest! {
        #[test]
        fn topk_invariant_under_monotone_maps(scores in prop::collection::vec(-5.0f32..5.0, 8), target in 0usize..8, k in 1usize..8) {
            let l = logits(1, 1, 8, scores.clone());
            let mapped = logits(1, 1, 8, scores.iter().map(|s| s * 4.0).collect());
            let t = LabelMap { height: 1, width: 1, labels: vec![target as u32] };
            prop_assert_eq!(topk_accuracy(&l, &t, k).unwrap(), topk_accuracy(&mapped, &t, k).unwrap());
        }
    }
}
