//! Caption-paired image datasets: JSONL manifests, the color-caption filter,
//! preprocessing into training samples, and a synthetic colored-shapes
//! generator whose lightness channel is identical across color variants.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{in_gamut, lab_pixel_to_srgb, rgb_to_lab, split_lab, srgb_pixel_to_lab, AbMap, LightnessMap, RgbImage};
use crate::error::{Error, Result};
use crate::imageio::{read_grey, read_rgb, resize_rgb, write_grey_png, write_png, GreyImage};
use crate::network::NetworkConfig;
use crate::quantizer::{LabelMap, QuantizerSpec};
use crate::text::lexicon::{ColorLexicon, CANONICAL_LIGHTNESS};
use crate::text::vocab::words;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Defaults to the image file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image_path: PathBuf,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub split: Split,
}

impl ManifestRecord {
    pub fn image_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            self.image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory that relative paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Short content hash used as a dataset id in reports.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_jsonl()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

/// Parses a JSONL manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest = DatasetManifest { root, records: Vec::new() };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Manifest { line: i + 1, message: e.to_string() })?;
        if record.captions.is_empty() {
            return Err(Error::Manifest { line: i + 1, message: "record has no captions".into() });
        }
        let index = manifest.records.len();
        let files = std::iter::once(("image", &record.image_path)).chain(record.mask_path.iter().map(|m| ("mask", m)));
        for (kind, p) in files {
            let full = manifest.resolve(p);
            if !full.is_file() {
                return Err(Error::Manifest {
                    line: i + 1,
                    message: format!("record {index}: {kind} file {} not found", full.display()),
                });
            }
        }
        manifest.records.push(record);
    }
    Ok(manifest)
}

pub fn caption_has_color_word(caption: &str, lexicon: &ColorLexicon) -> bool {
    words(caption).any(|w| lexicon.contains(&w))
}

/// Keeps records with at least one color-word caption, dropping the other captions.
pub fn filter_color_captions(manifest: &DatasetManifest, lexicon: &ColorLexicon) -> DatasetManifest {
    let records = manifest
        .records
        .iter()
        .filter_map(|r| {
            let captions: Vec<String> =
                r.captions.iter().filter(|c| caption_has_color_word(c, lexicon)).cloned().collect();
            (!captions.is_empty()).then(|| ManifestRecord { captions, ..r.clone() })
        })
        .collect();
    DatasetManifest { root: manifest.root.clone(), records }
}

/// One preprocessed training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// At the network input size.
    pub lightness: LightnessMap,
    /// At the network output size.
    pub labels: LabelMap,
    pub captions: Vec<String>,
    /// Object mask at output size, when the record has one.
    pub mask: Option<Vec<bool>>,
}

/// Mean of each `factor × factor` block.
pub fn area_downsample(ab: &AbMap, factor: usize) -> Result<AbMap> {
    if factor == 0 || !ab.height.is_multiple_of(factor) || !ab.width.is_multiple_of(factor) {
        return Err(Error::Shape(format!("{}×{} is not divisible by {factor}", ab.height, ab.width)));
    }
    let (h, w) = (ab.height / factor, ab.width / factor);
    let pool = |plane: &[f32]| -> Vec<f32> {
        let mut out = vec![0f32; h * w];
        for (y, row) in out.chunks_exact_mut(w).enumerate() {
            for (x, v) in row.iter_mut().enumerate() {
                let mut acc = 0f64;
                for dy in 0..factor {
                    let start = (y * factor + dy) * ab.width + x * factor;
                    acc += plane[start..start + factor].iter().map(|&p| p as f64).sum::<f64>();
                }
                *v = (acc / (factor * factor) as f64) as f32;
            }
        }
        out
    };
    Ok(AbMap { height: h, width: w, a: pool(&ab.a), b: pool(&ab.b) })
}

/// Output-resolution mask: an output pixel belongs to the object when every
/// input pixel of its `factor × factor` block does.
pub fn downsample_mask(mask: &[bool], height: usize, width: usize, factor: usize) -> Result<Vec<bool>> {
    if factor == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) || mask.len() != height * width {
        return Err(Error::Shape(format!("mask {height}×{width} cannot be pooled by {factor}")));
    }
    let (h, w) = (height / factor, width / factor);
    Ok((0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            (0..factor).all(|dy| (0..factor).all(|dx| mask[(y * factor + dy) * width + x * factor + dx]))
        })
        .collect())
}

fn mask_from_grey(grey: &GreyImage, size: usize) -> Vec<bool> {
    // Nearest-neighbour resampling keeps the mask binary.
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            let sy = (y * grey.height) / size;
            let sx = (x * grey.width) / size;
            grey.pixels[sy * grey.width + sx] >= 128
        })
        .collect()
}

/// A mask image of any size, as a boolean mask at output resolution.
pub fn object_mask(grey: &GreyImage, config: &NetworkConfig) -> Result<Vec<bool>> {
    let size = config.input_size;
    downsample_mask(&mask_from_grey(grey, size), size, size, config.output_stride())
}

/// Lightness at input size plus labels at output size for one image.
pub fn prepare_image(image: &RgbImage, quantizer: &QuantizerSpec, config: &NetworkConfig) -> Result<(LightnessMap, LabelMap)> {
    let size = config.input_size;
    let resized = if (image.height, image.width) == (size, size) { image.clone() } else { resize_rgb(image, size, size) };
    let (lightness, ab) = split_lab(&rgb_to_lab(&resized));
    let labels = quantizer.quantize_image(&area_downsample(&ab, config.output_stride())?)?;
    Ok((lightness, labels))
}

pub fn preprocess(
    manifest: &DatasetManifest,
    record: &ManifestRecord,
    quantizer: &QuantizerSpec,
    config: &NetworkConfig,
) -> Result<Sample> {
    let image = read_rgb(&manifest.resolve(&record.image_path))?;
    let (lightness, labels) = prepare_image(&image, quantizer, config)?;
    let mask = match &record.mask_path {
        Some(p) => Some(object_mask(&read_grey(&manifest.resolve(p))?, config)?),
        None => None,
    };
    Ok(Sample { id: record.image_id(), lightness, labels, captions: record.captions.clone(), mask })
}

/// A record that could not be preprocessed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SkippedRecord {
    pub index: usize,
    pub image_path: PathBuf,
    pub reason: String,
}

/// Preprocesses every record of `split`; undecodable images are reported, not fatal.
pub fn preprocess_split(
    manifest: &DatasetManifest,
    split: Split,
    quantizer: &QuantizerSpec,
    config: &NetworkConfig,
) -> (Vec<Sample>, Vec<SkippedRecord>) {
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for (index, record) in manifest.records.iter().enumerate().filter(|(_, r)| r.split == split) {
        match preprocess(manifest, record, quantizer, config) {
            Ok(s) => samples.push(s),
            Err(e) => skipped.push(SkippedRecord { index, image_path: record.image_path.clone(), reason: e.to_string() }),
        }
    }
    (samples, skipped)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_lowercase())
            .ok_or_else(|| Error::InvalidInput(format!("unknown shape {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub count: usize,
    /// The last `val_count + test_count` records go to the val and test splits.
    pub val_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub shapes: Vec<ShapeKind>,
    pub color_words: Vec<String>,
    pub background_lightness: f64,
    pub shape_lightness: f64,
    /// Shape extent as a fraction of the image side.
    pub min_extent: f64,
    pub max_extent: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 100,
            val_count: 0,
            test_count: 0,
            image_size: 64,
            shapes: ShapeKind::ALL.to_vec(),
            color_words: ["red", "green", "blue", "yellow"].map(String::from).to_vec(),
            background_lightness: 75.0,
            shape_lightness: CANONICAL_LIGHTNESS,
            min_extent: 0.35,
            max_extent: 0.65,
            seed: 0,
        }
    }
}

/// Placement of one shape, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeGeometry {
    pub kind: ShapeKind,
    pub center: [f64; 2],
    /// Side length, or diameter for circles.
    pub extent: f64,
}

impl ShapeGeometry {
    /// Whether the pixel centre `(x + ½, y + ½)` lies inside the shape.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (px, py) = (x as f64 + 0.5 - self.center[0], y as f64 + 0.5 - self.center[1]);
        let r = self.extent / 2.0;
        match self.kind {
            ShapeKind::Circle => px * px + py * py <= r * r,
            ShapeKind::Square => px.abs() <= r && py.abs() <= r,
            ShapeKind::Triangle => {
                // Upward isosceles triangle filling the bounding square.
                let t = (py + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && px.abs() <= r * t
            }
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, lexicon: &ColorLexicon) -> Result<()> {
        if self.color_words.len() < 2 {
            return Err(Error::Config("synthetic data needs at least two color words".into()));
        }
        for (i, w) in self.color_words.iter().enumerate() {
            if !lexicon.contains(w) {
                return Err(Error::Config(format!("{w:?} is not a lexicon color word")));
            }
            if self.color_words[..i].contains(w) {
                return Err(Error::Config(format!("color word {w:?} listed twice")));
            }
        }
        if self.shapes.is_empty() || self.count == 0 || self.image_size < 8 {
            return Err(Error::Config("need at least one shape, one sample and an image of 8 pixels or more".into()));
        }
        if self.val_count + self.test_count > self.count {
            return Err(Error::Config("val_count + test_count exceeds count".into()));
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent && self.max_extent <= 1.0) {
            return Err(Error::Config("shape extents must satisfy 0 < min ≤ max ≤ 1".into()));
        }
        for l in [self.background_lightness, self.shape_lightness] {
            if !(0.0..=100.0).contains(&l) {
                return Err(Error::Config(format!("lightness {l} outside [0, 100]")));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, index: usize) -> Split {
        let train = self.count - self.val_count - self.test_count;
        if index < train {
            Split::Train
        } else if index < train + self.val_count {
            Split::Val
        } else {
            Split::Test
        }
    }

    /// Color word of sample `index`; cycling keeps the words balanced in every split.
    pub fn color_of(&self, index: usize) -> &str {
        &self.color_words[index % self.color_words.len()]
    }
}

/// The 8-bit color closest to `lab`, with lightness error weighted far above
/// chroma error so that renderings of different hues share one L*.
pub fn render_color(lab: [f64; 3]) -> [u8; 3] {
    let base = lab_pixel_to_srgb(lab).0;
    let mut best = (f64::INFINITY, base);
    for d in 0..27 {
        let offs = [d / 9, (d / 3) % 3, d % 3].map(|o| o - 1);
        let cand = [0, 1, 2].map(|i| (base[i] as i32 + offs[i]).clamp(0, 255) as u8);
        let got = srgb_pixel_to_lab(cand);
        let err = 100.0 * (got[0] - lab[0]).powi(2) + (got[1] - lab[1]).powi(2) + (got[2] - lab[2]).powi(2);
        if err < best.0 {
            best = (err, cand);
        }
    }
    best.1
}

/// Draws a placement from `rng`; the color is chosen separately so that
/// variants of one sample share their geometry.
pub fn sample_geometry<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> ShapeGeometry {
    let size = spec.image_size as f64;
    let kind = spec.shapes[rng.gen_range(0..spec.shapes.len())];
    let extent = size * rng.gen_range(spec.min_extent..=spec.max_extent);
    let half = extent / 2.0;
    let center = [rng.gen_range(half..=size - half), rng.gen_range(half..=size - half)];
    ShapeGeometry { kind, center, extent }
}

/// Renders one sample: the image and its full-resolution mask.
pub fn render_shape(spec: &SyntheticSpec, geometry: &ShapeGeometry, ab: [f64; 2]) -> (RgbImage, GreyImage) {
    let n = spec.image_size;
    let background = render_color([spec.background_lightness, 0.0, 0.0]);
    let fill = render_color([spec.shape_lightness, ab[0], ab[1]]);
    let mut image = RgbImage::filled(n, n, background);
    let mut mask = GreyImage { height: n, width: n, pixels: vec![0; n * n] };
    for y in 0..n {
        for x in 0..n {
            if geometry.contains(y, x) {
                image.set(y, x, fill);
                mask.pixels[y * n + x] = 255;
            }
        }
    }
    (image, mask)
}

pub fn synthetic_caption(color: &str, shape: ShapeKind) -> String {
    format!("a {color} {} on a grey background", shape.name())
}

/// Writes `images/`, `masks/` and `manifest.jsonl` under `out_dir`.
///
/// `interior_factor` is the network output stride; every shape is redrawn
/// until at least one output pixel lies wholly inside it, so object masks at
/// output resolution are never empty.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    lexicon: &ColorLexicon,
    interior_factor: usize,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate(lexicon)?;
    for w in &spec.color_words {
        let ab = lexicon.get(w).expect("validated").ab;
        if !in_gamut([spec.shape_lightness, ab[0], ab[1]]) {
            return Err(Error::Config(format!("{w} is out of gamut at L*={}", spec.shape_lightness)));
        }
    }
    if interior_factor == 0 || !spec.image_size.is_multiple_of(interior_factor) {
        return Err(Error::Config(format!("image size {} is not a multiple of {interior_factor}", spec.image_size)));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_size;
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let color = spec.color_of(i);
        let (geometry, image, mask) = loop {
            let geometry = sample_geometry(spec, &mut rng);
            let (image, mask) = render_shape(spec, &geometry, lexicon.get(color).expect("validated").ab);
            let bits: Vec<bool> = mask.pixels.iter().map(|&p| p > 0).collect();
            if downsample_mask(&bits, n, n, interior_factor)?.contains(&true) {
                break (geometry, image, mask);
            }
        };
        let id = format!("{i:05}");
        let image_path = PathBuf::from("images").join(format!("{id}.png"));
        let mask_path = PathBuf::from("masks").join(format!("{id}.png"));
        write_png(&out_dir.join(&image_path), &image)?;
        write_grey_png(&out_dir.join(&mask_path), &mask)?;
        records.push(ManifestRecord {
            id: Some(id),
            image_path,
            captions: vec![synthetic_caption(color, geometry.kind)],
            mask_path: Some(mask_path),
            split: spec.split_of(i),
        });
    }
    let manifest = DatasetManifest { root: out_dir.to_path_buf(), records };
    let mut file = fs::File::create(out_dir.join("manifest.jsonl"))?;
    file.write_all(manifest.to_jsonl()?.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_downsample_and_interior_mask() {
        let ab = AbMap { height: 2, width: 4, a: vec![0.0, 2.0, 4.0, 4.0, 2.0, 4.0, 4.0, 4.0], b: vec![1.0; 8] };
        let d = area_downsample(&ab, 2).unwrap();
        assert_eq!((d.height, d.width), (1, 2));
        assert_eq!(d.a, vec![2.0, 4.0]);
        assert!(area_downsample(&ab, 3).is_err());
        let mask = [true, true, true, false, true, true, true, true];
        assert_eq!(downsample_mask(&mask, 2, 4, 2).unwrap(), vec![true, false]);
    }

    #[test]
    fn filter_keeps_whole_word_matches_only() {
        let lex = ColorLexicon::default();
        let rec = |captions: &[&str]| ManifestRecord {
            id: None,
            image_path: "x.png".into(),
            captions: captions.iter().map(|c| c.to_string()).collect(),
            mask_path: None,
            split: Split::Train,
        };
        let m = DatasetManifest {
            root: PathBuf::new(),
            records: vec![rec(&["a red car", "a car"]), rec(&["a cared-for lawn"]), rec(&["A BLUE sky"])],
        };
        let f = filter_color_captions(&m, &lex);
        assert_eq!(f.records.len(), 2);
        assert_eq!(f.records[0].captions, vec!["a red car"]);
        assert_eq!(filter_color_captions(&f, &lex), f);
    }

    #[test]
    fn render_color_matches_lightness_closely() {
        let lex = ColorLexicon::default();
        for e in lex.entries() {
            let rgb = render_color([60.0, e.ab[0], e.ab[1]]);
            let lab = srgb_pixel_to_lab(rgb);
            assert!((lab[0] - 60.0).abs() < 0.25, "{} {:?}", e.word, lab);
            assert!((lab[1] - e.ab[0]).abs() < 2.0 && (lab[2] - e.ab[1]).abs() < 2.0);
        }
    }

    #[test]
    fn shapes_contain_their_centre_and_not_the_corners() {
        for kind in ShapeKind::ALL {
            let g = ShapeGeometry { kind, center: [32.0, 32.0], extent: 20.0 };
            assert!(g.contains(32, 32));
            assert!(!g.contains(0, 0));
            assert!(!g.contains(22, 22) || kind == ShapeKind::Square);
        }
    }

    #[test]
    fn split_assignment_and_balanced_colors() {
        let spec = SyntheticSpec { count: 10, val_count: 2, test_count: 3, ..Default::default() };
        let splits: Vec<Split> = (0..10).map(|i| spec.split_of(i)).collect();
        assert_eq!(splits.iter().filter(|s| **s == Split::Train).count(), 5);
        assert_eq!(splits[5..7], [Split::Val, Split::Val]);
        assert_eq!(spec.color_of(0), "red");
        assert_eq!(spec.color_of(5), "green");
    }
}
