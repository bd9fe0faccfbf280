//! Binary tensor files: checkpoints and raw sample dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "QDIFFTF1"
//! manifest   u64 length, then UTF-8 JSON
//! count      u64
//! per tensor u32 name length, UTF-8 name, u32 rank, rank × u64 dims, numel × f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a write/read cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ImageBatch, Normalization};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::unet::UNetConfig;

pub const MAGIC: &[u8; 8] = b"QDIFFTF1";

/// Prefix of the EMA shadow tensors inside a checkpoint.
pub const EMA_PREFIX: &str = "ema/";

/// Largest rank accepted when reading, to reject garbage headers early.
const MAX_RANK: u32 = 8;

/// Serialize a manifest and named tensors.
pub fn encode_tensor_file<'a>(
    manifest: &serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Vec<u8> {
    let json = serde_json::to_vec(manifest).expect("JSON values always serialise");
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// A decoded tensor file: manifest plus tensors by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub manifest: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!(
                "{field}: needs {n} bytes, only {} left",
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, field)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, field)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self, field: &str) -> Result<usize> {
        let v = self.u64(field)?;
        usize::try_from(v).map_err(|_| self.error(format!("{field}: length {v} too large")))
    }

    fn error(&self, reason: String) -> Error {
        Error::format(self.context, Some(self.pos as u64), reason)
    }
}

/// Parse bytes produced by [`encode_tensor_file`]. `context` names the source in errors.
pub fn decode_tensor_file(bytes: &[u8], context: &str) -> Result<TensorFile> {
    let mut r = Reader {
        bytes,
        pos: 0,
        context,
    };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::format(
            context,
            Some(0),
            "magic: not a qdiff tensor file",
        ));
    }
    let json_len = r.len("manifest length")?;
    let json = r.take(json_len, "manifest")?;
    let manifest: serde_json::Value = serde_json::from_slice(json)
        .map_err(|e| Error::format(context, Some(16), format!("manifest: {e}")))?;
    let count = r.len("tensor count")?;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let name_len = r.u32(&format!("tensor #{i} name length"))? as usize;
        let name = std::str::from_utf8(r.take(name_len, &format!("tensor #{i} name"))?)
            .map_err(|_| r.error(format!("tensor #{i} name: not UTF-8")))?
            .to_owned();
        let rank = r.u32(&format!("tensor {name:?} rank"))?;
        if rank > MAX_RANK {
            return Err(r.error(format!("tensor {name:?} rank: {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.len(&format!("tensor {name:?} shape"))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|_| n))
            .ok_or_else(|| r.error(format!("tensor {name:?} shape: {shape:?} overflows")))?;
        let raw = r.take(numel * 8, &format!("tensor {name:?} data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(&shape, data)?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(r.error(format!("tensor {name:?}: duplicate name")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.error(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(TensorFile { manifest, tensors })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor_file(&bytes, &path.display().to_string())
}

fn manifest_field<T: serde::de::DeserializeOwned>(
    manifest: &serde_json::Value,
    field: &str,
    context: &str,
) -> Result<T> {
    let v = manifest
        .get(field)
        .ok_or_else(|| Error::format(context, None, format!("manifest field {field:?} missing")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::format(context, None, format!("manifest field {field:?}: {e}")))
}

/// Metadata stored beside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    /// Epochs completed when the parameters were captured (0 for the initial model).
    pub epoch: usize,
    /// Mean training loss of that epoch; absent for the initial model.
    pub mean_loss: Option<f64>,
    pub ema_decay: f64,
}

/// Live parameters, their EMA shadow and the metadata needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
    pub ema: ParamSet,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::json!({
            "kind": "checkpoint",
            "model": self.meta.model,
            "schedule": self.meta.schedule,
            "seed": self.meta.seed,
            "epoch": self.meta.epoch,
            "mean_loss": self.meta.mean_loss,
            "ema_decay": self.meta.ema_decay,
        });
        let ema_names: Vec<(String, &Tensor)> = self
            .ema
            .iter()
            .map(|(k, v)| (format!("{EMA_PREFIX}{k}"), v))
            .collect();
        encode_tensor_file(
            &manifest,
            self.params
                .iter()
                .chain(ema_names.iter().map(|(k, v)| (k.as_str(), *v))),
        )
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let file = decode_tensor_file(bytes, context)?;
        let kind: String = manifest_field(&file.manifest, "kind", context)?;
        if kind != "checkpoint" {
            return Err(Error::format(
                context,
                None,
                format!("manifest field \"kind\": expected \"checkpoint\", got {kind:?}"),
            ));
        }
        let meta = CheckpointMeta {
            model: manifest_field(&file.manifest, "model", context)?,
            schedule: manifest_field(&file.manifest, "schedule", context)?,
            seed: manifest_field(&file.manifest, "seed", context)?,
            epoch: manifest_field(&file.manifest, "epoch", context)?,
            mean_loss: manifest_field(&file.manifest, "mean_loss", context)?,
            ema_decay: manifest_field(&file.manifest, "ema_decay", context)?,
        };
        let mut params = ParamSet::new();
        let mut ema = ParamSet::new();
        for (name, t) in file.tensors {
            match name.strip_prefix(EMA_PREFIX) {
                Some(base) => ema.insert(base, t)?,
                None => params.insert(name, t)?,
            }
        }
        if !params.same_layout(&ema) {
            return Err(Error::format(
                context,
                None,
                "tensors: EMA shadow does not match the live parameters",
            ));
        }
        Ok(Self { meta, params, ema })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Store an image batch with its labels and normalization (one tensor `images`, one
/// `labels`).
pub fn save_batch(
    batch: &ImageBatch,
    extra: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let labels = Tensor::new(
        &[batch.len()],
        batch.labels.iter().map(|&l| l as f64).collect(),
    )?;
    let manifest = serde_json::json!({
        "kind": "images",
        "normalization": batch.normalization,
        "info": extra,
    });
    let bytes = encode_tensor_file(&manifest, [("images", &batch.data), ("labels", &labels)]);
    write_file(path.as_ref(), &bytes)
}

/// Inverse of [`save_batch`]; also returns the `info` value stored with it.
pub fn load_batch(path: impl AsRef<Path>) -> Result<(ImageBatch, serde_json::Value)> {
    let path = path.as_ref();
    let context = path.display().to_string();
    let mut file = read_file(path)?;
    let kind: String = manifest_field(&file.manifest, "kind", &context)?;
    if kind != "images" {
        return Err(Error::format(
            &context,
            None,
            format!("manifest field \"kind\": expected \"images\", got {kind:?}"),
        ));
    }
    let normalization: Normalization = manifest_field(&file.manifest, "normalization", &context)?;
    let info = file
        .manifest
        .get("info")
        .cloned()
        .unwrap_or(serde_json::Value::Null);
    let mut take = |name: &str| {
        file.tensors
            .remove(name)
            .ok_or_else(|| Error::format(&context, None, format!("tensor {name:?} missing")))
    };
    let images = take("images")?;
    let labels = take("labels")?;
    let labels = labels
        .data()
        .iter()
        .map(|&l| {
            if l.fract() == 0.0 && l.abs() < 9.0e15 {
                Ok(l as i64)
            } else {
                Err(Error::format(
                    &context,
                    None,
                    format!("tensor \"labels\": {l} is not an integer"),
                ))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = ImageBatch::new(images, labels, normalization)
        .map_err(|e| Error::format(&context, None, format!("tensor \"images\": {e}")))?;
    Ok((batch, info))
}
