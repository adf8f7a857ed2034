//! Checkpoint file: one JSON manifest line (name, shape, byte offset and CRC-32
//! per tensor) followed by a single little-endian f64 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

const FORMAT: &str = "spdp-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("corrupt checkpoint tensor `{name}` (#{index}): {detail}")]
    Corrupt { name: String, index: usize, detail: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    blob_bytes: usize,
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64le".into(),
                offset,
                crc32: crc32fast::hash(&blob[offset..]),
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: 1,
            blob_bytes: blob.len(),
            tensors: entries,
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Manifest("missing manifest line".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(CheckpointError::Manifest(format!(
                "unexpected format `{}`",
                manifest.format
            )));
        }
        let blob = &bytes[nl + 1..];
        if blob.len() != manifest.blob_bytes {
            return Err(CheckpointError::Manifest(format!(
                "blob has {} bytes, manifest declares {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for (index, e) in manifest.tensors.into_iter().enumerate() {
            let corrupt = |detail: String| CheckpointError::Corrupt {
                name: e.name.clone(),
                index,
                detail,
            };
            if e.dtype != "f64le" {
                return Err(corrupt(format!("unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > blob.len() {
                return Err(corrupt(format!(
                    "bytes {}..{end} exceed blob of {} bytes",
                    e.offset,
                    blob.len()
                )));
            }
            let raw = &blob[e.offset..end];
            let crc = crc32fast::hash(raw);
            if crc != e.crc32 {
                return Err(corrupt(format!(
                    "checksum {crc:08x} != {:08x} at byte offset {}",
                    e.crc32, e.offset
                )));
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(err.to_string()))?;
            tensors.push((e.name, t));
        }
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
