//! Caption encoder, colorization network and quantizer bundled into one model.

use serde::{Deserialize, Serialize};

use crate::colorspace::{lab_to_rgb_preserving_lightness, merge_lab, rgb_to_lab, split_lab, AbMap, LightnessMap, RgbImage};
use crate::error::{Error, Result};
use crate::imageio::resize_rgb;
use crate::network::{lightness_batch, resample_bilinear, Colorizer, Forward, Mode, NetworkConfig};
use crate::nn::film::FeatureMap;
use crate::nn::{Float, Param, ParamVisitor};
use crate::quantizer::{Logits, QuantizerSpec};
use crate::text::encoder::{CaptionEncoder, EncoderCache};
use crate::text::vocab::{tokenize, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// Per direction; the language code has `2 × hidden` entries.
    pub hidden: usize,
}

impl EncoderConfig {
    /// Encoder whose code matches `language_dim`.
    pub fn for_language_dim(language_dim: usize) -> Self {
        EncoderConfig { embed_dim: (language_dim / 4).clamp(8, 64), hidden: language_dim / 2 }
    }

    pub fn language_dim(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Clone, Debug)]
pub struct ColorizationModel<T> {
    pub quantizer: QuantizerSpec,
    pub vocab: Vocab,
    pub encoder_config: EncoderConfig,
    pub encoder: CaptionEncoder<T>,
    pub network: Colorizer<T>,
}

/// Network output for one image.
pub struct Prediction<T> {
    pub logits: Logits,
    /// Decoded at output resolution.
    pub ab: AbMap,
    /// Post-fusion feature map of every block, in block order.
    pub features: Vec<FeatureMap<T>>,
}

pub struct Colorized<T> {
    pub image: RgbImage,
    pub prediction: Prediction<T>,
}

/// Language codes for a batch, row-major `[N, |h|]`, with their encoder caches.
pub struct EncodedCaptions<T> {
    pub codes: Vec<T>,
    pub caches: Vec<EncoderCache<T>>,
}

impl<T: Float> ColorizationModel<T> {
    pub fn new(
        network: &NetworkConfig,
        encoder: EncoderConfig,
        vocab: Vocab,
        quantizer: QuantizerSpec,
        seed: u64,
    ) -> Result<Self> {
        quantizer.validate()?;
        if network.num_labels != quantizer.num_labels() {
            return Err(Error::Config(format!(
                "network predicts {} labels but the quantizer has {}",
                network.num_labels,
                quantizer.num_labels()
            )));
        }
        if network.fusion_mode.uses_language() && network.language_dim != encoder.language_dim() {
            return Err(Error::Config(format!(
                "language_dim {} does not match the encoder's 2 × {}",
                network.language_dim, encoder.hidden
            )));
        }
        if encoder.embed_dim == 0 || encoder.hidden == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let net = Colorizer::new(network, seed)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed ^ 0x5eed_e7c0);
        let enc = CaptionEncoder::new(vocab.len(), encoder.embed_dim, encoder.hidden, &mut rng);
        Ok(ColorizationModel { quantizer, vocab, encoder_config: encoder, encoder: enc, network: net })
    }

    pub fn config(&self) -> &NetworkConfig {
        self.network.config()
    }

    /// Encodes captions; `None` when the fusion mode ignores language.
    pub fn encode<S: AsRef<str>>(&self, captions: &[S]) -> Result<Option<EncodedCaptions<T>>> {
        if !self.config().fusion_mode.uses_language() {
            return Ok(None);
        }
        let mut codes = Vec::with_capacity(captions.len() * self.encoder.output_dim());
        let mut caches = Vec::with_capacity(captions.len());
        for c in captions {
            let tokens = tokenize(c.as_ref(), &self.vocab);
            let (h, cache) = self.encoder.encode_ids(&tokens.ids)?;
            codes.extend(h.0);
            caches.push(cache);
        }
        Ok(Some(EncodedCaptions { codes, caches }))
    }

    /// Forward pass over lightness maps already at the input size.
    pub fn forward<S: AsRef<str>>(
        &self,
        lightness: &[&LightnessMap],
        captions: &[S],
        mode: Mode,
    ) -> Result<(Forward<T>, Option<EncodedCaptions<T>>)> {
        if lightness.len() != captions.len() {
            return Err(Error::Shape(format!("{} images but {} captions", lightness.len(), captions.len())));
        }
        let input = lightness_batch(lightness)?;
        let encoded = self.encode(captions)?;
        let fwd = self.network.forward(&input, encoded.as_ref().map(|e| e.codes.as_slice()), mode)?;
        Ok((fwd, encoded))
    }

    /// Eval-mode predictions for a batch.
    pub fn predict_batch<S: AsRef<str>>(&self, lightness: &[&LightnessMap], captions: &[S]) -> Result<Vec<Prediction<T>>> {
        let (fwd, _) = self.forward(lightness, captions, Mode::Eval)?;
        Ok((0..lightness.len())
            .map(|n| {
                let logits = fwd.sample_logits(n);
                let ab = self.quantizer.decode_logits(&logits);
                let features = (0..fwd.features.len()).map(|b| fwd.feature_map(b, n)).collect();
                Prediction { logits, ab, features }
            })
            .collect())
    }

    pub fn predict(&self, lightness: &LightnessMap, caption: &str) -> Result<Prediction<T>> {
        Ok(self.predict_batch(&[lightness], &[caption])?.remove(0))
    }

    /// Lightness at the network's input size for an arbitrary image.
    pub fn input_lightness(&self, image: &RgbImage) -> LightnessMap {
        let size = self.config().input_size;
        let resized = if (image.height, image.width) == (size, size) { image.clone() } else { resize_rgb(image, size, size) };
        split_lab(&rgb_to_lab(&resized)).0
    }

    /// Colorizes `image` at its own resolution: the lightness is kept and the
    /// predicted ab is resampled to the image size.
    pub fn colorize(&self, image: &RgbImage, caption: &str) -> Result<Colorized<T>> {
        let prediction = self.predict(&self.input_lightness(image), caption)?;
        let (lightness, _) = split_lab(&rgb_to_lab(image));
        let ab = resample_bilinear(&prediction.ab, image.height, image.width);
        let lab = merge_lab(&lightness, &ab)?;
        Ok(Colorized { image: lab_to_rgb_preserving_lightness(&lab), prediction })
    }

    /// Visits encoder tensors under `encoder.` and network tensors under their own names.
    pub fn visit<V: ParamVisitor<T>>(&mut self, v: &mut V) {
        self.encoder.visit("encoder", v);
        self.network.visit(v);
    }

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
