//! The `.gqac` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `GQAC` |
//! | 4 | format version (`u32`) |
//! | 8 | metadata length in bytes (`u64`) |
//! | n | UTF-8 JSON metadata |
//! | rest | tensor payload |
//!
//! The metadata holds the model and training configs, per-layer allocation
//! state (current allocation and norm cache), step counter, seed, payload
//! scalar type and the tensor manifest: ordered names and shapes. The payload
//! is every manifest tensor's scalars concatenated in manifest order. The
//! scalar type is `f32` when every value survives a round trip through `f32`
//! and `f64` otherwise, so loading is always bit-exact.
//!
//! Noise and shuffling streams are pure functions of `(seed, step, ...)`, so
//! the seed and step counter are the complete random state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::LayerAllocState;
use crate::error::{Error, Result};
use crate::model::{ViT, ViTConfig, ViTParams};
use crate::tensor::{Precision, Tensor};
use crate::train::{AdamWState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"GQAC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ViT,
    pub train: Option<TrainConfig>,
    pub optimizer: Option<AdamWState>,
    /// Global step of the next update.
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    /// An untrained checkpoint at step 0.
    pub fn fresh(model: ViT, seed: u64) -> Self {
        Checkpoint {
            model,
            train: None,
            optimizer: None,
            step: 0,
            seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|source| Error::io(path, source))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| Error::io(path, source))?;
        Self::from_bytes(&bytes)
    }

    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .model
            .params
            .named()
            .into_iter()
            .map(|(n, t)| (format!("weights/{n}"), t))
            .collect();
        if let Some(opt) = &self.optimizer {
            out.extend(
                opt.m
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("adam_m/{n}"), t)),
            );
            out.extend(
                opt.v
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("adam_v/{n}"), t)),
            );
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let f32_exact = tensors.iter().all(|(_, t)| {
            t.data()
                .iter()
                .all(|&x| (x as f32 as f64).to_bits() == x.to_bits())
        });
        let dtype = if f32_exact {
            Precision::F32
        } else {
            Precision::F64
        };
        let meta = Metadata {
            model: self.model.config.clone(),
            train: self.train.clone(),
            alloc_states: self.model.alloc_states.clone(),
            step: self.step,
            seed: self.seed,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            dtype,
            manifest: tensors
                .iter()
                .map(|(name, t)| ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        let payload_len: usize =
            tensors.iter().map(|(_, t)| t.numel()).sum::<usize>() * dtype.byte_width();
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for &x in t.data() {
                match dtype {
                    Precision::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&x.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(format_err(
                0,
                format!(
                    "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                    bytes.len()
                ),
            ));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err(
                0,
                format!(
                    "bad magic {:?}, expected \"GQAC\"",
                    String::from_utf8_lossy(&bytes[..4])
                ),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format_err(
                4,
                format!("format version {version}, this build reads {FORMAT_VERSION}"),
            ));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let meta_end = (HEADER_LEN as u64)
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len() as u64);
        let Some(meta_end) = meta_end else {
            return Err(format_err(
                8,
                format!(
                    "metadata length {meta_len} exceeds the {} bytes after the header",
                    bytes.len() - HEADER_LEN
                ),
            ));
        };
        let meta_end = meta_end as usize;
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end]).map_err(|e| {
            format_err(
                HEADER_LEN as u64,
                format!("metadata is not valid JSON: {e}"),
            )
        })?;

        let width = meta.dtype.byte_width();
        let expected: usize = meta
            .manifest
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum::<usize>()
            * width;
        let actual = bytes.len() - meta_end;
        if expected != actual {
            return Err(format_err(
                meta_end as u64,
                format!(
                    "payload length mismatch: manifest needs {expected} bytes, file has {actual}"
                ),
            ));
        }
        let mut offset = meta_end;
        let mut stored = Vec::with_capacity(meta.manifest.len());
        for entry in &meta.manifest {
            let n: usize = entry.shape.iter().product();
            let data: Vec<f64> = bytes[offset..offset + n * width]
                .chunks_exact(width)
                .map(|c| match meta.dtype {
                    Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                    Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                })
                .collect();
            offset += n * width;
            stored.push((
                entry.name.clone(),
                Tensor::from_raw(entry.shape.clone(), data),
            ));
        }

        let mut next = stored.into_iter();
        let mut take_group = |prefix: &str| -> Result<ViTParams<Tensor>> {
            ViTParams::shapes(&meta.model).try_map(|name, shape| {
                let want = format!("{prefix}/{name}");
                match next.next() {
                    Some((got, t)) if got == want && t.shape() == shape.as_slice() => Ok(t),
                    Some((got, t)) => Err(Error::Format {
                        offset: HEADER_LEN as u64,
                        message: format!(
                            "manifest entry {got} {:?} where {want} {shape:?} was expected",
                            t.shape()
                        ),
                    }),
                    None => Err(Error::Format {
                        offset: HEADER_LEN as u64,
                        message: format!("manifest ends before {want}"),
                    }),
                }
            })
        };
        let params = take_group("weights")?;
        let optimizer = match meta.optimizer_step {
            Some(step) => Some(AdamWState {
                step,
                m: take_group("adam_m")?,
                v: take_group("adam_v")?,
            }),
            None => None,
        };
        if let Some((extra, _)) = next.next() {
            return Err(format_err(
                HEADER_LEN as u64,
                format!("unexpected manifest entry {extra}"),
            ));
        }
        let mut model = ViT::from_params(meta.model, params)?;
        if meta.alloc_states.len() != model.alloc_states.len() {
            return Err(format_err(
                HEADER_LEN as u64,
                format!(
                    "{} allocation states for {} layers",
                    meta.alloc_states.len(),
                    model.alloc_states.len()
                ),
            ));
        }
        model.alloc_states = meta.alloc_states;
        Ok(Checkpoint {
            model,
            train: meta.train,
            optimizer,
            step: meta.step,
            seed: meta.seed,
        })
    }
}

/// Reads only the metadata block, e.g. to inspect a checkpoint's configuration.
pub fn read_metadata(bytes: &[u8]) -> Result<serde_json::Value> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(format_err(0, "not a GQAC checkpoint"));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = HEADER_LEN.saturating_add(meta_len).min(bytes.len());
    Ok(serde_json::from_slice(&bytes[HEADER_LEN..end])?)
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: message.into(),
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    model: ViTConfig,
    train: Option<TrainConfig>,
    alloc_states: Vec<LayerAllocState>,
    step: u64,
    seed: u64,
    optimizer_step: Option<u64>,
    dtype: Precision,
    manifest: Vec<ManifestEntry>,
}
