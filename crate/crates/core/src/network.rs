//! Fully-convolutional colorization backbone with optional caption fusion.
//!
//! Each block is `conv → ReLU` repeated, then a final `conv → BN`, then
//! fusion, then ReLU. FILM modulates the batch-normalized map before the
//! nonlinearity. CONCAT appends `h` to the block's output, so the first conv
//! of the next block (and the 1×1 prediction head after the last block)
//! reads `c_n + |h|` channels. The captured feature map of a block is the
//! post-fusion, pre-ReLU activation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{AbMap, LightnessMap};
use crate::error::{Error, Result};
use crate::nn::batchnorm::{BatchNorm, BatchStats, BnCache};
use crate::nn::conv::{Conv2d, ConvGeometry};
use crate::nn::film::{FeatureMap, Film, FilmCoefficients};
use crate::nn::{Batch, Float, Param, ParamVisitor};
use crate::quantizer::Logits;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FusionMode {
    None,
    Concat,
    Film,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::None, FusionMode::Concat, FusionMode::Film];

    pub fn uses_language(self) -> bool {
        self != FusionMode::None
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::None => "NONE",
            FusionMode::Concat => "CONCAT",
            FusionMode::Film => "FILM",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" => Ok(FusionMode::None),
            "CONCAT" => Ok(FusionMode::Concat),
            "FILM" => Ok(FusionMode::Film),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?} (expected NONE, CONCAT or FILM)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub block_channels: Vec<usize>,
    pub convs_per_block: Vec<usize>,
    /// Stride of each block's first conv.
    pub block_strides: Vec<usize>,
    pub block_dilations: Vec<usize>,
    pub kernel_size: usize,
    pub fusion_mode: FusionMode,
    pub language_dim: usize,
    pub num_labels: usize,
}

impl NetworkConfig {
    pub const DEFAULT_BLOCKS: usize = 8;

    /// 64×64 input, output stride 4, `|h| = 256`.
    pub fn desk(fusion_mode: FusionMode) -> Self {
        NetworkConfig {
            input_size: 64,
            block_channels: vec![32, 64, 64, 128, 128, 128, 128, 128],
            convs_per_block: vec![2; 8],
            block_strides: vec![1, 2, 1, 2, 1, 1, 1, 1],
            block_dilations: vec![1, 1, 1, 1, 2, 2, 1, 1],
            kernel_size: 3,
            fusion_mode,
            language_dim: 256,
            num_labels: 625,
        }
    }

    /// Desk geometry at 224×224, giving 56×56 logits.
    pub fn full_resolution(fusion_mode: FusionMode) -> Self {
        NetworkConfig { input_size: 224, ..Self::desk(fusion_mode) }
    }

    /// Half-width desk variant used where CPU time is tight.
    pub fn narrow(fusion_mode: FusionMode) -> Self {
        NetworkConfig {
            block_channels: vec![16, 32, 32, 64, 64, 64, 64, 64],
            language_dim: 64,
            ..Self::desk(fusion_mode)
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.block_channels.len()
    }

    pub fn output_stride(&self) -> usize {
        self.block_strides.iter().product()
    }

    pub fn output_size(&self) -> usize {
        self.input_size / self.output_stride()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_blocks();
        if n == 0 {
            return Err(Error::Config("network needs at least one block".into()));
        }
        for (name, len) in [
            ("convs_per_block", self.convs_per_block.len()),
            ("block_strides", self.block_strides.len()),
            ("block_dilations", self.block_dilations.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("{name} has {len} entries for {n} blocks")));
            }
        }
        let lists = [&self.block_channels, &self.convs_per_block, &self.block_strides, &self.block_dilations];
        if lists.iter().any(|l| l.contains(&0)) {
            return Err(Error::Config("block channels, conv counts, strides and dilations must be positive".into()));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.num_labels == 0 || self.input_size == 0 {
            return Err(Error::Config("input size and label count must be positive".into()));
        }
        if self.fusion_mode.uses_language() && self.language_dim == 0 {
            return Err(Error::Config(format!("{} fusion needs a positive language_dim", self.fusion_mode)));
        }
        let stride = self.output_stride();
        if !self.input_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "output stride {stride} does not divide input size {}",
                self.input_size
            )));
        }
        Ok(())
    }

    fn geometry(&self, block: usize, conv: usize) -> ConvGeometry {
        let stride = if conv == 0 { self.block_strides[block] } else { 1 };
        ConvGeometry::same(self.kernel_size, stride, self.block_dilations[block])
    }

    /// `(kernel, out_channels)` of every conv that reads a map with `h` appended.
    pub fn concat_consumers(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = self.block_channels[1..].iter().map(|&c| (self.kernel_size, c)).collect();
        v.push((1, self.num_labels));
        v
    }
}

/// Analytic FILM overhead: two `c_n × |h|` projections per block.
pub fn film_overhead(block_channels: &[usize], language_dim: usize) -> usize {
    block_channels.iter().map(|c| 2 * language_dim * c).sum()
}

/// Analytic CONCAT overhead for a list of `(kernel, out_channels)` consumers.
pub fn concat_overhead(consumers: &[(usize, usize)], language_dim: usize) -> usize {
    consumers.iter().map(|(k, c)| k * k * language_dim * c).sum()
}

/// Parameter counts by module, from instantiated tensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterBreakdown {
    /// Conv weights over feature channels plus batch-norm affine, per block.
    pub blocks: Vec<usize>,
    /// Prediction conv over feature channels, plus its bias.
    pub head: usize,
    /// FILM projections, or the language slices of CONCAT-consuming convs.
    pub fusion_overhead: usize,
}

impl ParameterBreakdown {
    pub fn backbone(&self) -> usize {
        self.blocks.iter().sum::<usize>() + self.head
    }

    pub fn total(&self) -> usize {
        self.backbone() + self.fusion_overhead
    }
}

/// Builds the network for `config` and counts its tensors.
pub fn count_parameters(config: &NetworkConfig) -> Result<ParameterBreakdown> {
    Ok(Colorizer::<f32>::new(config, 0)?.parameter_breakdown())
}

#[derive(Clone, Debug)]
pub struct Block<T> {
    pub convs: Vec<Conv2d<T>>,
    pub bn: BatchNorm<T>,
    pub film: Option<Film<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BlockCache<T> {
    /// Input of every conv; `inputs[0]` is the block input.
    inputs: Vec<Batch<T>>,
    pre_bn: Batch<T>,
    bn: BnCache<T>,
    stats: Option<BatchStats<T>>,
    /// Batch-norm output, kept when FILM needs it for backward.
    post_bn: Option<Batch<T>>,
    film: Option<FilmCoefficients<T>>,
}

/// Result of a forward pass, holding what backward needs.
pub struct Forward<T> {
    /// `num_labels × N × out × out`.
    pub logits: Batch<T>,
    /// Post-fusion, pre-ReLU activation of every block.
    pub features: Vec<Batch<T>>,
    blocks: Vec<BlockCache<T>>,
    head_input: Batch<T>,
}

impl<T: Float> Forward<T> {
    /// Block `block` (0-based) feature map for sample `n`.
    pub fn feature_map(&self, block: usize, n: usize) -> FeatureMap<T> {
        FeatureMap::from_batch(&self.features[block], n)
    }

    /// Pixel-major logits for sample `n`.
    pub fn sample_logits(&self, n: usize) -> Logits {
        let b = &self.logits;
        let (k, plane) = (b.channels, b.plane());
        let mut data = vec![0f32; plane * k];
        for c in 0..k {
            let start = b.index(c, n, 0, 0);
            for (p, v) in b.data[start..start + plane].iter().enumerate() {
                data[p * k + c] = v.to_f32().unwrap_or(f32::NAN);
            }
        }
        Logits { height: b.height, width: b.width, num_labels: k, data }
    }
}

#[derive(Clone, Debug)]
pub struct Colorizer<T> {
    config: NetworkConfig,
    pub blocks: Vec<Block<T>>,
    pub head: Conv2d<T>,
}

fn relu_in_place<T: Float>(b: &mut Batch<T>) {
    b.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `d` wherever the ReLU output `y` was not positive.
fn relu_backward<T: Float>(d: &mut Batch<T>, y: &Batch<T>) {
    d.data.iter_mut().zip(&y.data).for_each(|(g, &v)| {
        if v <= T::zero() {
            *g = T::zero()
        }
    });
}

fn add_into<T: Float>(acc: &mut Option<Vec<T>>, g: Vec<T>) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

impl<T: Float> Colorizer<T> {
    /// Fresh weights drawn from a ChaCha stream seeded with `seed`.
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let concat = config.fusion_mode == FusionMode::Concat;
        let lang = config.language_dim;
        let mut blocks = Vec::with_capacity(config.num_blocks());
        let mut in_ch = 1;
        for (b, &out_ch) in config.block_channels.iter().enumerate() {
            let mut convs = Vec::new();
            for j in 0..config.convs_per_block[b] {
                let l = if concat && b > 0 && j == 0 { lang } else { 0 };
                convs.push(Conv2d::new(in_ch, l, out_ch, config.geometry(b, j), false, &mut rng));
                in_ch = out_ch;
            }
            let film = (config.fusion_mode == FusionMode::Film).then(|| Film::new(out_ch, lang));
            blocks.push(Block { convs, bn: BatchNorm::new(out_ch), film });
        }
        let head_lang = if concat { lang } else { 0 };
        let head = Conv2d::new(in_ch, head_lang, config.num_labels, ConvGeometry::same(1, 1, 1), true, &mut rng);
        Ok(Colorizer { config: config.clone(), blocks, head })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    fn check_language<'a>(&self, batch: usize, lang: Option<&'a [T]>) -> Result<Option<&'a [T]>> {
        if !self.config.fusion_mode.uses_language() {
            return Ok(None);
        }
        let lang = lang.ok_or_else(|| {
            Error::Config(format!("{} fusion needs a language code but none was given", self.config.fusion_mode))
        })?;
        if lang.len() != batch * self.config.language_dim {
            return Err(Error::Shape(format!(
                "language codes hold {} values, expected {batch} × {}",
                lang.len(),
                self.config.language_dim
            )));
        }
        Ok(Some(lang))
    }

    /// Runs the network on a normalized single-channel batch.
    ///
    /// `lang` is row-major `[N, language_dim]` and ignored for NONE fusion.
    /// In training mode batch statistics are used; fold them into the running
    /// averages with [`Colorizer::update_batch_norm`].
    pub fn forward(&self, input: &Batch<T>, lang: Option<&[T]>, mode: Mode) -> Result<Forward<T>> {
        let size = self.config.input_size;
        if input.channels != 1 || input.height != size || input.width != size {
            return Err(Error::Shape(format!(
                "network input must be 1×{size}×{size}, got {}×{}×{}",
                input.channels, input.height, input.width
            )));
        }
        let lang = self.check_language(input.batch, lang)?;
        let mut x = input.clone();
        let mut features = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let mut inputs = Vec::with_capacity(block.convs.len());
            let last = block.convs.len() - 1;
            for (j, conv) in block.convs.iter().enumerate() {
                let l = if conv.lang_channels > 0 { lang } else { None };
                let mut y = conv.forward(&x, l);
                inputs.push(std::mem::replace(&mut x, Batch::zeros(0, 0, 0, 0)));
                if j < last {
                    relu_in_place(&mut y);
                }
                x = y;
            }
            let pre_bn = x;
            let (normed, bn, stats) = match mode {
                Mode::Train => {
                    let (y, c, s) = block.bn.forward_train(&pre_bn);
                    (y, c, Some(s))
                }
                Mode::Eval => {
                    let (y, c) = block.bn.forward_eval(&pre_bn);
                    (y, c, None)
                }
            };
            let (fused, post_bn, film) = match (&block.film, lang) {
                (Some(film), Some(l)) => {
                    let (y, coeff) = film.forward(&normed, l);
                    (y, Some(normed), Some(coeff))
                }
                _ => (normed, None, None),
            };
            if let Some(i) = fused.first_non_finite() {
                return Err(Error::Numeric(format!("block {} activations (element {i})", b + 1)));
            }
            let mut out = fused.clone();
            relu_in_place(&mut out);
            features.push(fused);
            caches.push(BlockCache { inputs, pre_bn, bn, stats, post_bn, film });
            x = out;
        }
        let head_lang = if self.head.lang_channels > 0 { lang } else { None };
        let logits = self.head.forward(&x, head_lang);
        if logits.first_non_finite().is_some() {
            return Err(Error::Numeric("prediction head logits".into()));
        }
        Ok(Forward { logits, features, blocks: caches, head_input: x })
    }

    /// Applies the batch statistics of a training-mode pass to the running averages.
    pub fn update_batch_norm(&mut self, fwd: &Forward<T>) {
        for (block, cache) in self.blocks.iter_mut().zip(&fwd.blocks) {
            if let Some(stats) = &cache.stats {
                block.bn.update_running(stats);
            }
        }
    }

    /// Accumulates parameter gradients from `dlogits` and returns the gradient
    /// with respect to the language codes (row-major `[N, language_dim]`),
    /// or `None` for NONE fusion.
    pub fn backward(&mut self, fwd: &Forward<T>, lang: Option<&[T]>, dlogits: &Batch<T>) -> Result<Option<Vec<T>>> {
        if !dlogits.same_shape(&fwd.logits) {
            return Err(Error::Shape("logit gradient does not match the forward pass".into()));
        }
        let lang = self.check_language(dlogits.batch, lang)?;
        let mut dlang: Option<Vec<T>> = None;
        let head_lang = if self.head.lang_channels > 0 { lang } else { None };
        let (mut d, dl) = self.head.backward(&fwd.head_input, head_lang, dlogits);
        if let Some(g) = dl {
            add_into(&mut dlang, g);
        }
        for (b, block) in self.blocks.iter_mut().enumerate().rev() {
            let cache = &fwd.blocks[b];
            relu_backward(&mut d, &fwd.features[b]);
            if let (Some(film), Some(coeff), Some(z), Some(l)) = (&mut block.film, &cache.film, &cache.post_bn, lang) {
                let (dz, g) = film.backward(z, l, coeff, &d);
                add_into(&mut dlang, g);
                d = dz;
            }
            d = block.bn.backward(&cache.pre_bn, &cache.bn, &d);
            for (j, conv) in block.convs.iter_mut().enumerate().rev() {
                let l = if conv.lang_channels > 0 { lang } else { None };
                let (dx, g) = conv.backward(&cache.inputs[j], l, &d);
                if let Some(g) = g {
                    add_into(&mut dlang, g);
                }
                d = dx;
                if j > 0 {
                    relu_backward(&mut d, &cache.inputs[j]);
                }
            }
        }
        Ok(dlang.or_else(|| lang.map(|l| vec![T::zero(); l.len()])))
    }

    pub fn visit<V: ParamVisitor<T>>(&mut self, v: &mut V) {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (j, conv) in block.convs.iter_mut().enumerate() {
                conv.visit(&format!("block{}.conv{}", b + 1, j + 1), v);
            }
            block.bn.visit(&format!("block{}.bn", b + 1), v);
            if let Some(film) = &mut block.film {
                film.visit(&format!("block{}.film", b + 1), v);
            }
        }
        self.head.visit("head", v);
    }

    pub fn parameter_breakdown(&self) -> ParameterBreakdown {
        let split = |c: &Conv2d<T>| {
            let kk = c.geometry.kernel * c.geometry.kernel;
            let lang = c.out_channels * c.lang_channels * kk;
            (c.parameter_count() - lang, lang)
        };
        let mut fusion = 0;
        let mut blocks = Vec::new();
        for block in &self.blocks {
            let mut n = block.bn.gamma.len() + block.bn.beta.len();
            for conv in &block.convs {
                let (f, l) = split(conv);
                n += f;
                fusion += l;
            }
            if let Some(film) = &block.film {
                fusion += film.w_gamma.len() + film.w_beta.len();
            }
            blocks.push(n);
        }
        let (head, l) = split(&self.head);
        ParameterBreakdown { blocks, head, fusion_overhead: fusion + l }
    }

    /// Zeroes every accumulated gradient.
    pub fn zero_grad(&mut self) {
        struct Z;
        impl<T: Float> ParamVisitor<T> for Z {
            fn param(&mut self, _: &str, p: &mut Param<T>) {
                p.zero_grad();
            }
        }
        self.visit(&mut Z);
    }
}

/// Stacks lightness maps into a network input, normalized to `L/100 − 0.5`.
pub fn lightness_batch<T: Float>(maps: &[&LightnessMap]) -> Result<Batch<T>> {
    let first = maps.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut batch = Batch::zeros(1, maps.len(), h, w);
    for (n, m) in maps.iter().enumerate() {
        if m.height != h || m.width != w {
            return Err(Error::Shape(format!("lightness map {n} is {}×{}, expected {h}×{w}", m.height, m.width)));
        }
        let start = batch.index(0, n, 0, 0);
        for (dst, &l) in batch.data[start..start + h * w].iter_mut().zip(&m.values) {
            *dst = T::of(l as f64 / 100.0 - 0.5);
        }
    }
    Ok(batch)
}

/// Bilinear resize of the a and b channels to `target ≥ source`, aligned corners.
pub fn upsample_prediction(ab: &AbMap, height: usize, width: usize) -> Result<AbMap> {
    if height < ab.height || width < ab.width || ab.height == 0 || ab.width == 0 {
        return Err(Error::Shape(format!(
            "cannot upsample {}×{} to {height}×{width}",
            ab.height, ab.width
        )));
    }
    Ok(resample_bilinear(ab, height, width))
}

/// Bilinear resampling to any size; corner samples map onto corner samples.
pub fn resample_bilinear(ab: &AbMap, height: usize, width: usize) -> AbMap {
    let coord = |o: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if dst == 1 || src == 1 {
            let centre = if src == 1 { 0 } else { (src - 1) / 2 };
            return (centre, centre, 0.0);
        }
        let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let i0 = (pos.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, pos - i0 as f64)
    };
    let resample = |plane: &[f32]| -> Vec<f32> {
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let (y0, y1, ty) = coord(y, ab.height, height);
            for x in 0..width {
                let (x0, x1, tx) = coord(x, ab.width, width);
                let at = |yy: usize, xx: usize| plane[yy * ab.width + xx] as f64;
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                out.push((top * (1.0 - ty) + bottom * ty) as f32);
            }
        }
        out
    };
    AbMap { height, width, a: resample(&ab.a), b: resample(&ab.b) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(fusion: FusionMode) -> NetworkConfig {
        NetworkConfig {
            input_size: 8,
            block_channels: vec![4; 8],
            convs_per_block: vec![2, 1, 1, 1, 1, 1, 1, 2],
            block_strides: vec![1, 2, 1, 1, 1, 1, 1, 1],
            block_dilations: vec![1, 1, 1, 1, 2, 1, 1, 1],
            kernel_size: 3,
            fusion_mode: fusion,
            language_dim: 6,
            num_labels: 5,
        }
    }

    fn input(n: usize, size: usize) -> Batch<f64> {
        let mut b = Batch::zeros(1, n, size, size);
        b.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7919) % 101) as f64 / 101.0 - 0.5);
        b
    }

    #[test]
    fn desk_output_is_sixteen_and_full_resolution_is_fifty_six() {
        let c = NetworkConfig::desk(FusionMode::Film);
        c.validate().unwrap();
        assert_eq!(c.output_size(), 16);
        assert_eq!(NetworkConfig::full_resolution(FusionMode::None).output_size(), 56);
    }

    #[test]
    fn logits_have_output_resolution() {
        let net = Colorizer::<f64>::new(&tiny(FusionMode::Concat), 1).unwrap();
        let lang = vec![0.1; 2 * 6];
        let fwd = net.forward(&input(2, 8), Some(&lang), Mode::Eval).unwrap();
        assert_eq!((fwd.logits.channels, fwd.logits.batch, fwd.logits.height), (5, 2, 4));
        assert_eq!(fwd.features.len(), 8);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(FusionMode::Film);
        c.block_strides[0] = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny(FusionMode::Film);
        c.convs_per_block.pop();
        assert!(c.validate().is_err());
        let mut c = tiny(FusionMode::Film);
        c.language_dim = 0;
        assert!(c.validate().is_err());
        c.fusion_mode = FusionMode::None;
        c.validate().unwrap();
    }

    #[test]
    fn missing_language_is_a_config_error_and_none_ignores_it() {
        let net = Colorizer::<f64>::new(&tiny(FusionMode::Film), 1).unwrap();
        assert!(matches!(net.forward(&input(1, 8), None, Mode::Eval), Err(Error::Config(_))));
        let plain = Colorizer::<f64>::new(&tiny(FusionMode::None), 1).unwrap();
        let a = plain.forward(&input(1, 8), None, Mode::Eval).unwrap();
        let b = plain.forward(&input(1, 8), Some(&[9.0; 6]), Mode::Eval).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn non_finite_input_names_the_block() {
        let net = Colorizer::<f64>::new(&tiny(FusionMode::None), 1).unwrap();
        let mut x = input(1, 8);
        x.data[5] = f64::NAN;
        match net.forward(&x, None, Mode::Eval) {
            Err(Error::Numeric(m)) => assert!(m.contains("block 1"), "{m}"),
            other => panic!("expected numeric error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn breakdown_matches_analytic_overheads() {
        let film = tiny(FusionMode::Film);
        assert_eq!(count_parameters(&film).unwrap().fusion_overhead, film_overhead(&film.block_channels, 6));
        let concat = tiny(FusionMode::Concat);
        assert_eq!(
            count_parameters(&concat).unwrap().fusion_overhead,
            concat_overhead(&concat.concat_consumers(), 6)
        );
        let none = count_parameters(&tiny(FusionMode::None)).unwrap();
        assert_eq!(none.fusion_overhead, 0);
        assert_eq!(none.backbone(), count_parameters(&film).unwrap().backbone());
    }

    #[test]
    fn upsample_examples() {
        let uni = AbMap::uniform(3, 3, 5.0, -2.0);
        let up = upsample_prediction(&uni, 7, 9).unwrap();
        assert!(up.a.iter().all(|&v| (v - 5.0).abs() < 1e-6) && up.b.iter().all(|&v| (v + 2.0).abs() < 1e-6));

        let m = AbMap { height: 2, width: 2, a: vec![0.0, 3.0, 6.0, 9.0], b: vec![0.0; 4] };
        let up = upsample_prediction(&m, 4, 4).unwrap();
        // aligned corners: source spacing is 3 output pixels, so steps of 1 along x and 2 along y
        let expected = [0.0, 1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 5.0, 4.0, 5.0, 6.0, 7.0, 6.0, 7.0, 8.0, 9.0];
        for (got, want) in up.a.iter().zip(expected) {
            assert!((got - want).abs() < 1e-5, "{:?}", up.a);
        }
        assert_eq!(upsample_prediction(&m, 2, 2).unwrap(), m);
        assert!(upsample_prediction(&m, 1, 4).is_err());
    }
}
