//! Versioned binary checkpoints.
//!
//! Layout: `MKNFCKPT`, format version (u32 LE), header length (u32 LE),
//! JSON header, tensor data as f32 LE in header order, then the SHA-256 of
//! everything before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Parameterized;

const MAGIC: &[u8; 8] = b"MKNFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint: model kind, free-form metadata and named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn of(kind: &str, meta: serde_json::Value, model: &impl Parameterized) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: model.tensors().into_iter().map(|(n, v)| (n, v.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, v)| TensorEntry {
                    name: name.clone(),
                    len: v.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.tensors.iter().map(|t| t.1.len()).sum::<usize>() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, v) in &self.tensors {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Decodes a checkpoint. A digest mismatch is [`Error::Tamper`];
    /// structural problems are [`Error::Format`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + 32 {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Tamper("checkpoint digest does not match its contents".into()));
        }
        if &body[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let header_bytes = body
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Format("checkpoint header is truncated".into()))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        let mut data = &body[16 + hlen..];
        let expected: usize = header.tensors.iter().map(|t| 4 * t.len).sum();
        if data.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {} data bytes, header describes {expected}",
                data.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let (chunk, rest) = data.split_at(4 * t.len);
            data = rest;
            let v = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push((t.name, v));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    /// Copies the stored tensors into `model`, which must have exactly the
    /// same names and sizes.
    pub fn apply(&self, model: &mut impl Parameterized) -> Result<()> {
        let mut targets = model.tensors_mut();
        if targets.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for ((name, dst), (src_name, src)) in targets.iter_mut().zip(&self.tensors) {
            if name != src_name || dst.len() != src.len() {
                return Err(Error::Format(format!(
                    "tensor mismatch: model {name}[{}] vs checkpoint {src_name}[{}]",
                    dst.len(),
                    src.len()
                )));
            }
            dst.copy_from_slice(src);
        }
        Ok(())
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
