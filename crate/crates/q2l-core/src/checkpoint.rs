//! Single-file model checkpoints.
//!
//! Layout: magic `Q2LC`, format version, scalar width, the model config as
//! JSON, then a manifest of (name, payload offset, shape) entries followed by
//! the parameter tensors in canonical order, each in the tensor wire format.
//! Loads reconstruct the architecture from the embedded config and must match
//! the manifest exactly; round trips are bit-exact.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::{AnyModel, ModelError};
use crate::tensor::{read_tensor, write_tensor, Scalar, SerialError, Tensor};

const CKPT_MAGIC: [u8; 4] = *b"Q2LC";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serial(#[from] SerialError),
    #[error("config error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bad checkpoint magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint stores {found}-byte scalars, expected {expected}")]
    ScalarWidth { found: u32, expected: u32 },
    #[error("manifest truncated or inconsistent: {0}")]
    CorruptManifest(String),
    #[error("parameter {index} is {found}, model expects {expected}")]
    NameMismatch {
        index: usize,
        found: String,
        expected: String,
    },
    #[error("parameter {name} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{0} bytes of trailing data after the last tensor")]
    TrailingBytes(usize),
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::CorruptManifest(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Serializes a model, config included, into checkpoint bytes.
pub fn encode_model<S: Scalar>(model: &AnyModel<S>) -> Result<Vec<u8>, CheckpointError> {
    let params = model.named_params();
    let config_json = serde_json::to_vec(model.config())?;

    // Payload first, recording where each tensor lands.
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in &params {
        entries.push((name.clone(), payload.len() as u64, t.shape().to_vec()));
        write_tensor(&mut payload, t)?;
    }

    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    push_u32(&mut out, CKPT_VERSION);
    push_u32(&mut out, S::BYTES as u32);
    push_u32(&mut out, config_json.len() as u32);
    out.extend_from_slice(&config_json);
    push_u32(&mut out, entries.len() as u32);
    for (name, offset, shape) in &entries {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u64(&mut out, *offset);
        push_u32(&mut out, shape.len() as u32);
        for &e in shape {
            push_u32(&mut out, e as u32);
        }
    }
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Rebuilds a model from checkpoint bytes. Parameters come back as plain
/// leaves; call [`AnyModel::set_trainable`] before resuming training.
pub fn decode_model<S: Scalar>(bytes: &[u8]) -> Result<AnyModel<S>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic,
            expected: CKPT_MAGIC,
        });
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let width = r.u32()?;
    if width != S::BYTES as u32 {
        return Err(CheckpointError::ScalarWidth {
            found: width,
            expected: S::BYTES as u32,
        });
    }
    let config_len = r.u32()? as usize;
    let config = serde_json::from_slice(r.take(config_len)?)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::CorruptManifest(e.to_string()))?;
        let offset = r.u64()? as usize;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        entries.push((name, offset, shape));
    }

    let payload = &bytes[r.pos..];
    let mut model = AnyModel::<S>::scaffold(config)?;
    {
        let params = model.named_params_mut();
        if params.len() != entries.len() {
            return Err(CheckpointError::CorruptManifest(format!(
                "manifest lists {} tensors, model has {}",
                entries.len(),
                params.len()
            )));
        }
        let mut cursor = 0usize;
        for (index, ((expected_name, slot), (name, offset, shape))) in
            params.into_iter().zip(&entries).enumerate()
        {
            if name != &expected_name {
                return Err(CheckpointError::NameMismatch {
                    index,
                    found: name.clone(),
                    expected: expected_name,
                });
            }
            if shape != slot.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: shape.clone(),
                    expected: slot.shape().to_vec(),
                });
            }
            if *offset != cursor {
                return Err(CheckpointError::CorruptManifest(format!(
                    "tensor {name} at offset {offset}, expected {cursor}"
                )));
            }
            let mut blob: &[u8] = &payload[*offset..];
            let before = blob.len();
            let tensor: Tensor<S> = read_tensor(&mut blob)?;
            let used = before - blob.len();
            if tensor.shape() != shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    found: tensor.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
            cursor = offset + used;
            *slot = tensor;
        }
        if cursor != payload.len() {
            return Err(CheckpointError::TrailingBytes(payload.len() - cursor));
        }
    }
    Ok(model)
}

pub fn save_model<S: Scalar>(path: &Path, model: &AnyModel<S>) -> Result<(), CheckpointError> {
    Ok(fs::write(path, encode_model(model)?)?)
}

pub fn load_model<S: Scalar>(path: &Path) -> Result<AnyModel<S>, CheckpointError> {
    decode_model(&fs::read(path)?)
}
