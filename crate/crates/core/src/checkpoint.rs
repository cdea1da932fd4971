//! Tensor container shared by encoder and prompt checkpoints.
//!
//! Layout: one magic line, one line of compact JSON manifest, then the raw
//! blob of little-endian `f64` values for every tensor in manifest order.
//! Each manifest entry records its byte offset into the blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BACKBONE_MAGIC: &str = "MAGP-CKPT-1";
pub const PROMPT_MAGIC: &str = "MAGP-PROMPT-1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic string: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("truncated checkpoint: blob has {found} bytes, manifest declares {expected}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file_offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    #[serde(flatten)]
    header: Map<String, Value>,
    tensors: Vec<TensorEntry>,
    blob_bytes: usize,
}

/// Tensors read from a container, looked up by name.
#[derive(Debug, Clone)]
pub struct Container<S> {
    pub header: Map<String, Value>,
    pub tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Container<S> {
    pub fn take(&mut self, name: &str) -> Result<Tensor<S>, CheckpointError> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn header_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T, CheckpointError> {
        let v = self
            .header
            .get(key)
            .ok_or_else(|| CheckpointError::Manifest(format!("missing field {key:?}")))?;
        serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Manifest(format!("{key}: {e}")))
    }
}

pub fn encode_container<S: Scalar>(
    magic: &str,
    header: Map<String, Value>,
    tensors: &[(String, &Tensor<S>)],
) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape(),
            file_offset: blob.len(),
        });
        for &x in t.data() {
            blob.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        header,
        tensors: entries,
        blob_bytes: blob.len(),
    };
    let mut out = Vec::with_capacity(blob.len() + 1024);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(
        serde_json::to_string(&manifest)
            .expect("manifest serializes")
            .as_bytes(),
    );
    out.push(b'\n');
    out.extend_from_slice(&blob);
    out
}

pub fn decode_container<S: Scalar>(magic: &str, bytes: &[u8]) -> Result<Container<S>, CheckpointError> {
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let found = lines.next().unwrap_or_default();
    if found != magic.as_bytes() {
        return Err(CheckpointError::BadMagic {
            expected: magic.into(),
            found: String::from_utf8_lossy(&found[..found.len().min(32)]).into_owned(),
        });
    }
    let manifest_bytes = lines
        .next()
        .ok_or_else(|| CheckpointError::Manifest("missing manifest line".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            expected: FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    let blob = lines.next().unwrap_or_default();
    let declared: usize = manifest.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 8).sum();
    if blob.len() != manifest.blob_bytes || declared != manifest.blob_bytes {
        return Err(CheckpointError::Truncated {
            expected: manifest.blob_bytes.max(declared),
            found: blob.len(),
        });
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let n = entry.shape[0] * entry.shape[1];
        let end = entry.file_offset + n * 8;
        let raw = blob.get(entry.file_offset..end).ok_or(CheckpointError::Truncated {
            expected: end,
            found: blob.len(),
        })?;
        let data = raw
            .chunks_exact(8)
            .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        let t =
            Tensor::new(entry.shape[0], entry.shape[1], data).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        tensors.push((entry.name, t));
    }
    Ok(Container {
        header: manifest.header,
        tensors,
    })
}

pub fn write_container<S: Scalar>(
    path: impl AsRef<Path>,
    magic: &str,
    header: Map<String, Value>,
    tensors: &[(String, &Tensor<S>)],
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode_container(magic, header, tensors)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_container<S: Scalar>(path: impl AsRef<Path>, magic: &str) -> Result<Container<S>, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_container(magic, &bytes)
}
