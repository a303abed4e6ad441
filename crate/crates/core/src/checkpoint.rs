//! Named-tensor checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u64` header length,
//! a JSON header (metadata plus a tensor table of name, dtype, shape and byte
//! offset), the raw little-endian tensor data, and a SHA-256 of everything
//! before it. Files are written to a temporary sibling and renamed into place.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ColorizationModel, EncoderConfig};
use crate::network::NetworkConfig;
use crate::nn::{Float, Param, ParamVisitor};
use crate::quantizer::{QuantizerSpec, WeightTable};
use crate::text::vocab::Vocab;
use crate::training::{EpochRecord, TrainConfig};

pub const MAGIC: [u8; 8] = *b"L2CCKPT\0";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub model_id: String,
    pub quantizer: QuantizerSpec,
    pub vocab_fingerprint: String,
    pub vocab: Vocab,
    pub network: NetworkConfig,
    pub encoder: EncoderConfig,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub weights: Option<WeightTable>,
}

impl CheckpointMetadata {
    pub fn for_model<T: Float>(
        model: &ColorizationModel<T>,
        model_id: &str,
        train: Option<TrainConfig>,
        epoch: usize,
        history: Vec<EpochRecord>,
        weights: Option<WeightTable>,
    ) -> Self {
        CheckpointMetadata {
            model_id: model_id.to_string(),
            quantizer: model.quantizer,
            vocab_fingerprint: model.vocab.fingerprint(),
            vocab: model.vocab.clone(),
            network: model.config().clone(),
            encoder: model.encoder_config,
            train,
            epoch,
            history,
            weights,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: CheckpointMetadata,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Raw little-endian bytes.
    pub data: Vec<u8>,
}

impl Tensor {
    fn element_bytes(dtype: &str) -> Result<usize> {
        match dtype {
            "f32" => Ok(4),
            "f64" => Ok(8),
            other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        }
    }

    pub fn values<T: Float>(&self) -> Result<Vec<T>> {
        let size = Self::element_bytes(&self.dtype)?;
        Ok(self
            .data
            .chunks_exact(size)
            .map(|c| match size {
                4 => T::of(f32::read_le(c) as f64),
                _ => T::of(f64::read_le(c)),
            })
            .collect())
    }
}

/// A verified checkpoint file.
#[derive(Clone, Debug)]
pub struct CheckpointFile {
    pub metadata: CheckpointMetadata,
    pub tensors: IndexMap<String, Tensor>,
}

struct Collect<T> {
    entries: Vec<(String, Vec<usize>, Vec<T>)>,
}

impl<T: Float> ParamVisitor<T> for Collect<T> {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        self.entries.push((name.to_string(), p.shape.clone(), p.value.clone()));
    }

    fn buffer(&mut self, name: &str, shape: &[usize], value: &mut Vec<T>) {
        self.entries.push((name.to_string(), shape.to_vec(), value.clone()));
    }
}

/// Serializes every parameter and buffer of `model` under `meta`.
pub fn save_checkpoint<T: Float>(path: &Path, model: &mut ColorizationModel<T>, meta: &CheckpointMetadata) -> Result<()> {
    let mut collect = Collect { entries: Vec::new() };
    model.visit(&mut collect);
    let mut data = Vec::new();
    let mut tensors = Vec::with_capacity(collect.entries.len());
    for (name, shape, values) in collect.entries {
        tensors.push(TensorEntry { name, dtype: T::DTYPE.to_string(), shape, offset: data.len() });
        for v in values {
            v.write_le(&mut data);
        }
    }
    let header = serde_json::to_vec(&Header { metadata: meta.clone(), tensors })?;
    let mut bytes = Vec::with_capacity(20 + header.len() + data.len() + DIGEST_LEN);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&data);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Reads and verifies a checkpoint without building a model.
pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let bytes = fs::read(path).map_err(|e| corrupt(format!("cannot read {}: {e}", path.display())))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<CheckpointFile> {
    if bytes.len() < 20 + DIGEST_LEN || bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch; the file is truncated or corrupted"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| corrupt("header length out of range"))?;
    let header: Header =
        serde_json::from_slice(&body[20..data_start]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let data = &body[data_start..];
    let mut tensors = IndexMap::with_capacity(header.tensors.len());
    for t in header.tensors {
        let len = t.shape.iter().product::<usize>() * Tensor::element_bytes(&t.dtype)?;
        let end = t.offset.checked_add(len).filter(|&e| e <= data.len()).ok_or_else(|| corrupt(format!("tensor {} out of range", t.name)))?;
        let tensor = Tensor { dtype: t.dtype, shape: t.shape, data: data[t.offset..end].to_vec() };
        if tensors.insert(t.name.clone(), tensor).is_some() {
            return Err(corrupt(format!("tensor {} stored twice", t.name)));
        }
    }
    let meta = &header.metadata;
    if meta.vocab.fingerprint() != meta.vocab_fingerprint {
        return Err(corrupt("vocabulary does not match its fingerprint"));
    }
    if meta.quantizer.num_labels() != meta.network.num_labels {
        return Err(corrupt("quantizer label count differs from the network's"));
    }
    Ok(CheckpointFile { metadata: header.metadata, tensors })
}

struct Assign<'a> {
    tensors: &'a IndexMap<String, Tensor>,
    used: usize,
    error: Option<Error>,
}

impl Assign<'_> {
    fn fill<T: Float>(&mut self, name: &str, shape: &[usize], dst: &mut [T]) {
        if self.error.is_some() {
            return;
        }
        let Some(t) = self.tensors.get(name) else {
            self.error = Some(corrupt(format!("missing tensor {name}")));
            return;
        };
        if t.shape != shape {
            self.error = Some(corrupt(format!("tensor {name} has shape {:?}, model expects {shape:?}", t.shape)));
            return;
        }
        match t.values::<T>() {
            Ok(v) => {
                dst.copy_from_slice(&v);
                self.used += 1;
            }
            Err(e) => self.error = Some(e),
        }
    }
}

impl<T: Float> ParamVisitor<T> for Assign<'_> {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        let shape = p.shape.clone();
        self.fill(name, &shape, &mut p.value);
    }

    fn buffer(&mut self, name: &str, shape: &[usize], value: &mut Vec<T>) {
        self.fill(name, shape, value);
    }
}

/// Rebuilds the model stored in `file`, requiring every tensor to be present.
pub fn model_from_checkpoint<T: Float>(file: &CheckpointFile) -> Result<ColorizationModel<T>> {
    let m = &file.metadata;
    let mut model = ColorizationModel::new(&m.network, m.encoder, m.vocab.clone(), m.quantizer, 0)?;
    let mut assign = Assign { tensors: &file.tensors, used: 0, error: None };
    model.visit(&mut assign);
    if let Some(e) = assign.error {
        return Err(e);
    }
    if assign.used != file.tensors.len() {
        return Err(corrupt(format!(
            "checkpoint holds {} tensors but the model uses {}",
            file.tensors.len(),
            assign.used
        )));
    }
    Ok(model)
}

/// Strict load. With `expected` set, a different quantizer is refused.
pub fn load_checkpoint<T: Float>(
    path: &Path,
    expected: Option<&QuantizerSpec>,
) -> Result<(ColorizationModel<T>, CheckpointMetadata)> {
    let file = read_checkpoint(path)?;
    if let Some(q) = expected {
        if *q != file.metadata.quantizer {
            return Err(corrupt(format!(
                "quantizer mismatch: checkpoint has {:?}, expected {q:?}",
                file.metadata.quantizer
            )));
        }
    }
    let model = model_from_checkpoint(&file)?;
    Ok((model, file.metadata))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct WarmStartReport {
    pub loaded: Vec<String>,
    /// Convolutions that gained language channels; those start at zero.
    pub widened: Vec<String>,
    /// Tensors left at their current values, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn is_backbone(name: &str) -> bool {
    name.starts_with("head.") || (name.starts_with("block") && (name.contains(".conv") || name.contains(".bn.")))
}

struct WarmStart<'a> {
    tensors: &'a IndexMap<String, Tensor>,
    report: WarmStartReport,
    error: Option<Error>,
}

impl WarmStart<'_> {
    fn apply<T: Float>(&mut self, name: &str, shape: &[usize], dst: &mut [T]) {
        if !is_backbone(name) || self.error.is_some() {
            return;
        }
        let Some(t) = self.tensors.get(name) else {
            self.report.skipped.push((name.to_string(), "not in checkpoint".into()));
            return;
        };
        let values = match t.values::<T>() {
            Ok(v) => v,
            Err(e) => {
                self.error = Some(e);
                return;
            }
        };
        if t.shape == shape {
            dst.copy_from_slice(&values);
            self.report.loaded.push(name.to_string());
        } else if t.shape.len() == 4 && shape.len() == 4 && t.shape[0] == shape[0] && t.shape[1] < shape[1] && t.shape[2..] == shape[2..] {
            // [out, in, k, k] into [out, in + lang, k, k]: copy the feature slice, zero the rest.
            let (src_row, dst_row) = (t.shape[1..].iter().product::<usize>(), shape[1..].iter().product::<usize>());
            for o in 0..shape[0] {
                let d = &mut dst[o * dst_row..(o + 1) * dst_row];
                d[..src_row].copy_from_slice(&values[o * src_row..(o + 1) * src_row]);
                d[src_row..].iter_mut().for_each(|v| *v = T::zero());
            }
            self.report.widened.push(name.to_string());
        } else {
            self.report.skipped.push((name.to_string(), format!("shape {:?} vs {shape:?}", t.shape)));
        }
    }
}

impl<T: Float> ParamVisitor<T> for WarmStart<'_> {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        let shape = p.shape.clone();
        self.apply(name, &shape, &mut p.value);
    }

    fn buffer(&mut self, name: &str, shape: &[usize], value: &mut Vec<T>) {
        self.apply(name, shape, value);
    }
}

/// Copies convolution and batch-norm tensors from a checkpoint (typically a
/// NONE-fusion one) into `model`. Fusion and encoder tensors keep their
/// current values. The file is fully verified before anything is written.
pub fn warm_start<T: Float>(model: &mut ColorizationModel<T>, path: &Path) -> Result<WarmStartReport> {
    let file = read_checkpoint(path)?;
    if file.metadata.quantizer != model.quantizer {
        return Err(corrupt("quantizer mismatch between checkpoint and model"));
    }
    let mut staged = model.clone();
    let mut ws = WarmStart { tensors: &file.tensors, report: WarmStartReport::default(), error: None };
    staged.visit(&mut ws);
    if let Some(e) = ws.error {
        return Err(e);
    }
    *model = staged;
    Ok(ws.report)
}
