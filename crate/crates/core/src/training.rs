//! Class-rebalanced cross-entropy training of the encoder and network together.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMetadata};
use crate::colorspace::LightnessMap;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::ColorizationModel;
use crate::network::{FusionMode, Mode};
use crate::nn::{Batch, Float, Param, ParamVisitor};
use crate::quantizer::{default_epsilon, LabelMap, Logits, WeightTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to zero over all steps.
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::InvalidInput(format!("unknown learning-rate schedule {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Smoothing added to label frequencies before inversion.
    pub epsilon: f64,
    /// Uniform weights when false.
    pub rebalance: bool,
    pub fusion_mode: FusionMode,
    /// Validate (and checkpoint) every this many epochs.
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            epsilon: default_epsilon(625),
            rebalance: true,
            fusion_mode: FusionMode::Film,
            eval_every: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn rate_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub acc1: Option<f64>,
    pub acc5: Option<f64>,
}

fn check_labels(logits: &Logits, targets: &LabelMap, weights: &[f64]) -> Result<()> {
    if (logits.height, logits.width) != (targets.height, targets.width) {
        return Err(Error::Shape(format!(
            "logits are {}×{} but targets are {}×{}",
            logits.height, logits.width, targets.height, targets.width
        )));
    }
    if weights.len() != logits.num_labels {
        return Err(Error::Shape(format!("{} weights for {} labels", weights.len(), logits.num_labels)));
    }
    Ok(())
}

/// Mean over pixels of `w_y · (−log softmax(logits)_y)`.
pub fn weighted_ce_loss(logits: &Logits, targets: &LabelMap, weights: &WeightTable) -> Result<f64> {
    check_labels(logits, targets, &weights.weights)?;
    let n = targets.labels.len();
    let mut total = 0.0;
    for (p, &y) in targets.labels.iter().enumerate() {
        let scores = logits.pixel(p);
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("logits at pixel {p}")));
        }
        let y = y as usize;
        if y >= scores.len() {
            return Err(Error::Index { index: y, limit: scores.len() });
        }
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + scores.iter().map(|&s| (s as f64 - max).exp()).sum::<f64>().ln();
        total += weights.weights[y] * (lse - scores[y] as f64);
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Loss and its gradient over a channel-major logit batch; the mean runs over
/// every pixel of every sample.
pub fn weighted_ce_batch<T: Float>(logits: &Batch<T>, targets: &[&LabelMap], weights: &[T]) -> Result<(f64, Batch<T>)> {
    let k = logits.channels;
    if targets.len() != logits.batch || weights.len() != k {
        return Err(Error::Shape("targets or weights do not match the logit batch".into()));
    }
    let plane = logits.plane();
    let p_total = logits.row_len();
    let mut y = Vec::with_capacity(p_total);
    for t in targets {
        if (t.height, t.width) != (logits.height, logits.width) {
            return Err(Error::Shape(format!("target {}×{} vs logits {}×{}", t.height, t.width, logits.height, logits.width)));
        }
        for &l in &t.labels {
            if l as usize >= k {
                return Err(Error::Index { index: l as usize, limit: k });
            }
            y.push(l as usize);
        }
    }
    debug_assert_eq!(y.len(), plane * logits.batch);
    let mut max = vec![T::neg_infinity(); p_total];
    for c in 0..k {
        for (m, &v) in max.iter_mut().zip(logits.channel_row(c)) {
            *m = m.max(v);
        }
    }
    if let Some(p) = max.iter().position(|m| !m.is_finite()) {
        return Err(Error::Numeric(format!("logits at pixel {p}")));
    }
    let mut grad = logits.clone();
    let mut sum = vec![T::zero(); p_total];
    for c in 0..k {
        let row = &mut grad.data[c * p_total..(c + 1) * p_total];
        for ((g, s), &m) in row.iter_mut().zip(sum.iter_mut()).zip(&max) {
            *g = (*g - m).exp();
            *s += *g;
        }
    }
    let inv_n = T::one() / T::of(p_total as f64);
    let mut loss = 0.0;
    for p in 0..p_total {
        let yc = y[p];
        let log_p = (logits.data[yc * p_total + p] - max[p]).to_f64().unwrap_or(f64::NAN) - sum[p].to_f64().unwrap_or(f64::NAN).ln();
        loss -= weights[yc].to_f64().unwrap_or(f64::NAN) * log_p;
    }
    for c in 0..k {
        let row = &mut grad.data[c * p_total..(c + 1) * p_total];
        for (p, g) in row.iter_mut().enumerate() {
            let w = weights[y[p]];
            let onehot = if y[p] == c { T::one() } else { T::zero() };
            *g = w * (*g / sum[p] - onehot) * inv_n;
        }
    }
    Ok((loss / p_total as f64, grad))
}

/// Adam without weight decay; moment buffers follow the visit order of the model.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Default for Adam<T> {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }
}

struct AdamVisit<'a, T> {
    opt: &'a mut Adam<T>,
    index: usize,
    lr: T,
    c1: T,
    c2: T,
}

impl<T: Float> ParamVisitor<T> for AdamVisit<'_, T> {
    fn param(&mut self, _: &str, p: &mut Param<T>) {
        if self.opt.m.len() <= self.index {
            self.opt.m.push(vec![T::zero(); p.len()]);
            self.opt.v.push(vec![T::zero(); p.len()]);
        }
        let (b1, b2, eps) = (T::of(self.opt.beta1), T::of(self.opt.beta2), T::of(self.opt.eps));
        let m = &mut self.opt.m[self.index];
        let v = &mut self.opt.v[self.index];
        for i in 0..p.len() {
            let g = p.grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            p.value[i] -= self.lr * (m[i] / self.c1) / ((v[i] / self.c2).sqrt() + eps);
        }
        self.index += 1;
    }
}

impl<T: Float> Adam<T> {
    pub fn step(&mut self, model: &mut ColorizationModel<T>, lr: f64) {
        self.step += 1;
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        model.visit(&mut AdamVisit { opt: self, index: 0, lr: T::of(lr), c1, c2 });
    }
}

/// Class weights for a training set, following the config's rebalancing switch.
pub fn training_weights(samples: &[Sample], num_labels: usize, cfg: &TrainConfig) -> Result<WeightTable> {
    if !cfg.rebalance {
        return Ok(WeightTable::uniform(num_labels));
    }
    let hist = crate::quantizer::label_histogram(samples.iter().map(|s| &s.labels), num_labels);
    crate::quantizer::compute_rebalancing_weights(&hist, cfg.epsilon)
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Last checkpoint written, if a directory was configured.
    pub checkpoint: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.jsonl";

/// Everything `train` needs besides the model.
pub struct TrainInputs<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub weights: &'a WeightTable,
    pub model_id: &'a str,
}

fn append_history(dir: &Path, record: &EpochRecord) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(dir.join(HISTORY_FILE))?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Trains `model` in place. Data order and caption choice are fixed by
/// `cfg.seed`. A non-finite loss aborts the run: the model is restored to
/// the start of the failing epoch and the last checkpoint is left untouched.
pub fn train<T: Float>(
    model: &mut ColorizationModel<T>,
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.fusion_mode != model.config().fusion_mode {
        return Err(Error::Config(format!(
            "training config says {} but the model was built for {}",
            cfg.fusion_mode,
            model.config().fusion_mode
        )));
    }
    if inputs.train.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    if inputs.weights.weights.len() != model.quantizer.num_labels() {
        return Err(Error::Shape("weight table does not match the label space".into()));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir)?;
        let _ = fs::remove_file(dir.join(HISTORY_FILE));
    }
    let weights: Vec<T> = inputs.weights.weights.iter().map(|&w| T::of(w)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::default();
    let steps_per_epoch = inputs.train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut checkpoint = None;
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let snapshot = model.clone();
        let mut order: Vec<usize> = (0..inputs.train.len()).collect();
        order.shuffle(&mut rng);
        let picks: Vec<usize> = order.iter().map(|&i| rng.gen_range(0..inputs.train[i].captions.len().max(1))).collect();
        let mut loss_sum = 0.0;
        for (chunk, pick) in order.chunks(cfg.batch_size).zip(picks.chunks(cfg.batch_size)) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &inputs.train[i]).collect();
            let captions: Vec<&str> =
                batch.iter().zip(pick).map(|(s, &j)| s.captions.get(j).map(String::as_str).unwrap_or("")).collect();
            let result = train_step(model, &mut adam, &batch, &captions, &weights, cfg.rate_at(step, total_steps));
            match result {
                Ok(loss) if loss.is_finite() => loss_sum += loss,
                Ok(_) | Err(Error::Numeric(_)) => {
                    *model = snapshot;
                    let kept = checkpoint
                        .as_ref()
                        .map(|p: &PathBuf| format!("; last good checkpoint: {}", p.display()))
                        .unwrap_or_default();
                    return Err(Error::Numeric(format!("training loss at epoch {epoch}, step {step}{kept}")));
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let mut record = EpochRecord { epoch, loss: loss_sum / steps_per_epoch as f64, acc1: None, acc5: None };
        let due = epoch % cfg.eval_every == 0 || epoch == cfg.epochs;
        if due && !inputs.val.is_empty() {
            let report = evaluate(model, inputs.val, &model.quantizer, inputs.model_id, "validation")?;
            record.acc1 = Some(report.acc1);
            record.acc5 = Some(report.acc5);
        }
        history.push(record.clone());
        on_epoch(&record);
        if let Some(dir) = &cfg.checkpoint_dir {
            append_history(dir, &record)?;
            if due {
                let path = dir.join(CHECKPOINT_FILE);
                let meta = CheckpointMetadata::for_model(model, inputs.model_id, Some(cfg.clone()), epoch, history.clone(), Some(inputs.weights.clone()));
                save_checkpoint(&path, model, &meta)?;
                checkpoint = Some(path);
            }
        }
    }
    Ok(TrainOutcome { history, checkpoint })
}

/// One optimizer step; returns the batch loss.
pub fn train_step<T: Float>(
    model: &mut ColorizationModel<T>,
    adam: &mut Adam<T>,
    batch: &[&Sample],
    captions: &[&str],
    weights: &[T],
    lr: f64,
) -> Result<f64> {
    let ls: Vec<&LightnessMap> = batch.iter().map(|s| &s.lightness).collect();
    let targets: Vec<&LabelMap> = batch.iter().map(|s| &s.labels).collect();
    let (fwd, encoded) = model.forward(&ls, captions, Mode::Train)?;
    let (loss, dlogits) = weighted_ce_batch(&fwd.logits, &targets, weights)?;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let codes = encoded.as_ref().map(|e| e.codes.as_slice());
    let dlang = model.network.backward(&fwd, codes, &dlogits)?;
    model.network.update_batch_norm(&fwd);
    if let (Some(enc), Some(dl)) = (&encoded, dlang) {
        let l = model.encoder.output_dim();
        for (i, cache) in enc.caches.iter().enumerate() {
            model.encoder.backward(cache, &dl[i * l..(i + 1) * l]);
        }
    }
    adam.step(model, lr);
    model.zero_grad();
    Ok(loss)
}
