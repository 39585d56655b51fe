//! Binary checkpoint format.
//!
//! Layout: `IDST` magic, `u32` LE version, `u64` LE header length, a JSON
//! header, then little-endian `f32` blobs in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Model, ModelSpec};
use crate::tensor::{Dtype, RunningStats, Scalar, Tensor};

use super::config::OptimizerKind;
use super::optim::{Optimizer, Slot};

pub const MAGIC: &[u8; 4] = b"IDST";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model together with its optimizer state and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Optimizer>,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    /// Free-form run metadata (normalization constants, method, …).
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    crate_version: String,
    spec: ModelSpec,
    dtype: Dtype,
    epoch: usize,
    seed: u64,
    config_hash: String,
    metadata: BTreeMap<String, String>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<BlobEntry>,
    blob_bytes: u64,
    blob_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    steps: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

struct BlobWriter {
    entries: Vec<BlobEntry>,
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: String, shape: Vec<usize>, values: &[f32]) {
        self.entries.push(BlobEntry {
            name,
            shape,
            offset: self.bytes.len() as u64,
        });
        for &v in values {
            v.write_le(&mut self.bytes);
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            epoch: 0,
            seed: 0,
            config_hash: String::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = BlobWriter {
            entries: Vec::new(),
            bytes: Vec::new(),
        };
        for (name, p) in self.model.param_names().into_iter().zip(self.model.params()) {
            blobs.push(name, p.shape().to_vec(), p.data());
        }
        for (l, stats) in self.model.running_stats().iter().enumerate() {
            if let Some(s) = stats {
                blobs.push(format!("layer{}.running_mean", l + 1), vec![s.mean.len()], &s.mean);
                blobs.push(format!("layer{}.running_var", l + 1), vec![s.var.len()], &s.var);
            }
        }
        let optimizer = self.optimizer.as_ref().map(|opt| {
            for (i, slot) in opt.slots.iter().enumerate() {
                blobs.push(format!("optimizer.{i}.first"), vec![slot.first.len()], &slot.first);
                blobs.push(format!("optimizer.{i}.second"), vec![slot.second.len()], &slot.second);
            }
            OptimizerHeader {
                kind: opt.kind,
                momentum: opt.momentum,
                weight_decay: opt.weight_decay,
                steps: opt.slots.iter().map(|s| s.step).collect(),
            }
        });
        let header = Header {
            crate_version: crate::VERSION.to_string(),
            spec: self.model.spec().clone(),
            dtype: Dtype::F32,
            epoch: self.epoch,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            metadata: self.metadata.clone(),
            optimizer,
            blob_bytes: blobs.bytes.len() as u64,
            blob_sha256: hex(&Sha256::digest(&blobs.bytes)),
            tensors: blobs.entries,
        };
        let json = serde_json::to_vec_pretty(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + blobs.bytes.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blobs.bytes);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Integrity(format!("file holds only {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(Error::Integrity("header is truncated".into()));
        }
        let header: Header = serde_json::from_slice(&body[..header_len])
            .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
        let blob = &body[header_len..];
        if blob.len() as u64 != header.blob_bytes {
            return Err(Error::Integrity(format!(
                "expected {} bytes of tensor data, found {}",
                header.blob_bytes,
                blob.len()
            )));
        }
        if hex(&Sha256::digest(blob)) != header.blob_sha256 {
            return Err(Error::Integrity("tensor data checksum mismatch".into()));
        }
        if header.dtype != Dtype::F32 {
            return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
        }
        let mut tensors: BTreeMap<&str, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        for (i, entry) in header.tensors.iter().enumerate() {
            let start = entry.offset as usize;
            let end = header.tensors.get(i + 1).map_or(blob.len(), |e| e.offset as usize);
            let count: usize = entry.shape.iter().product();
            if end < start || end - start != count * 4 {
                return Err(Error::Integrity(format!("tensor `{}` has inconsistent extent", entry.name)));
            }
            let values = blob[start..end].chunks_exact(4).map(f32::read_le).collect();
            tensors.insert(&entry.name, (entry.shape.clone(), values));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Integrity(format!("missing tensor `{name}`")))
        };
        let template = Model::build(header.spec.clone(), 0)?;
        let mut params = Vec::new();
        for name in template.param_names() {
            let (shape, values) = take(&name)?;
            params.push(Tensor::new(shape, values)?);
        }
        let mut running = Vec::new();
        for (l, stats) in template.running_stats().iter().enumerate() {
            running.push(match stats {
                Some(_) => Some(RunningStats {
                    mean: take(&format!("layer{}.running_mean", l + 1))?.1,
                    var: take(&format!("layer{}.running_var", l + 1))?.1,
                }),
                None => None,
            });
        }
        let model = Model::from_parts(header.spec, params, running)?;
        let optimizer = match header.optimizer {
            Some(h) => {
                let mut slots = Vec::with_capacity(h.steps.len());
                for (i, &step) in h.steps.iter().enumerate() {
                    slots.push(Slot {
                        step,
                        first: take(&format!("optimizer.{i}.first"))?.1,
                        second: take(&format!("optimizer.{i}.second"))?.1,
                    });
                }
                Some(Optimizer {
                    kind: h.kind,
                    momentum: h.momentum,
                    weight_decay: h.weight_decay,
                    slots,
                })
            }
            None => None,
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Integrity(format!("unexpected tensor `{extra}`")));
        }
        Ok(Checkpoint {
            model,
            optimizer,
            epoch: header.epoch,
            seed: header.seed,
            config_hash: header.config_hash,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `checkpoint` to `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    checkpoint.save(path)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
