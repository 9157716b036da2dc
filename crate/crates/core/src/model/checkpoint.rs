//! Checkpoint container.
//!
//! ```text
//! "GCKP" | version: u32 LE | header_len: u32 LE | header (JSON, header_len bytes)
//!        | parameters as f32 LE, concatenated in header order
//! ```
//!
//! The header carries the model config and the ordered `(name, shape)` list.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TrainedModel};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<HeaderEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let raw = bytes.get(at..at + 4).ok_or(Error::Truncated {
        what: "checkpoint",
        expected: at + 4,
        found: bytes.len(),
    })?;
    Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
}

impl TrainedModel {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| HeaderEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Format {
            what: "checkpoint header",
            detail: e.to_string(),
        })?;
        let header_len = u32::try_from(header.len()).map_err(|_| Error::Format {
            what: "checkpoint header",
            detail: "header exceeds 4 GiB".into(),
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.params.scalar_count());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let magic: [u8; 4] = bytes
            .get(..4)
            .ok_or(Error::Truncated {
                what: "checkpoint",
                expected: 4,
                found: bytes.len(),
            })?
            .try_into()
            .expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                what: "checkpoint",
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = read_u32(bytes, 4)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "checkpoint",
                version,
            });
        }
        let header_len = read_u32(bytes, 8)? as usize;
        let header_end = 12 + header_len;
        let header_bytes = bytes.get(12..header_end).ok_or(Error::Truncated {
            what: "checkpoint header",
            expected: header_end,
            found: bytes.len(),
        })?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| Error::Format {
            what: "checkpoint header",
            detail: e.to_string(),
        })?;

        let total: usize = header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        let payload = &bytes[header_end..];
        if payload.len() != 4 * total {
            return Err(Error::Truncated {
                what: "checkpoint payload",
                expected: 4 * total,
                found: payload.len(),
            });
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let mut params = ParamStore::new();
        for entry in header.params {
            let n = entry.shape.iter().product();
            let data: Vec<f32> = floats.by_ref().take(n).collect();
            params.insert(entry.name, Tensor::new(entry.shape, data)?)?;
        }
        TrainedModel::new(header.config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
