//! Versioned named-tensor container used for checkpoints and pretrained
//! weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes   "FCDDTNSR"
//! version     u32       ARCHIVE_VERSION
//! header_len  u64
//! header      JSON      {"metadata": …, "tensors": [{"name", "shape", "dtype", "offset", "len"}]}
//! data        f32 × Σ len, tensors back to back at their offsets (in elements)
//! ```
//!
//! The header is the manifest: tensor names, shapes and dtypes can be
//! checked before any payload is interpreted.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{FcddError, Result};

pub const MAGIC: &[u8; 8] = b"FCDDTNSR";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub metadata: serde_json::Value,
    pub tensors: IndexMap<String, ArrayD<f32>>,
}

fn format_err(msg: impl Into<String>) -> FcddError {
    FcddError::CheckpointFormat(msg.into())
}

impl TensorArchive {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            tensors: IndexMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        })
        .map_err(|e| format_err(e.to_string()))?;

        let mut out = Vec::with_capacity(20 + header.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses only the manifest, without touching tensor payloads.
    pub fn read_manifest(bytes: &[u8]) -> Result<(serde_json::Value, Vec<TensorEntry>, usize)> {
        if bytes.len() < 20 {
            return Err(format_err("file shorter than archive preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(format_err("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != ARCHIVE_VERSION {
            return Err(FcddError::VersionMismatch {
                found: version,
                expected: ARCHIVE_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| format_err("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..data_start]).map_err(|e| format_err(format!("bad header: {e}")))?;
        Ok((header.metadata, header.tensors, data_start))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (metadata, entries, data_start) = Self::read_manifest(bytes)?;
        let data = &bytes[data_start..];
        let mut tensors = IndexMap::with_capacity(entries.len());
        for e in entries {
            if e.dtype != "f32" {
                return Err(format_err(format!(
                    "tensor `{}` has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            if e.shape.iter().product::<usize>() != e.len {
                return Err(format_err(format!("tensor `{}` shape does not match length", e.name)));
            }
            let start = e.offset * 4;
            let end = start + e.len * 4;
            if end > data.len() {
                return Err(format_err(format!("truncated payload for tensor `{}`", e.name)));
            }
            let values: Vec<f32> = data[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|e| format_err(e.to_string()))?;
            if tensors.insert(e.name.clone(), arr).is_some() {
                return Err(format_err(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| FcddError::write(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FcddError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorArchive {
        let mut a = TensorArchive::new(serde_json::json!({"kind": "test", "x": 0.1}));
        a.tensors.insert(
            "w".into(),
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.0, 0.0, 1e-30, 7.0]).unwrap(),
        );
        a.tensors
            .insert("b".into(), ArrayD::from_shape_vec(IxDyn(&[1]), vec![f32::MAX]).unwrap());
        a
    }

    #[test]
    fn round_trip() {
        let a = sample();
        assert_eq!(TensorArchive::from_bytes(&a.to_bytes().unwrap()).unwrap(), a);
    }

    #[test]
    fn truncation_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, 25, bytes.len() - 1] {
            assert!(
                matches!(
                    TensorArchive::from_bytes(&bytes[..cut]),
                    Err(FcddError::CheckpointFormat(_))
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn version_mismatch_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            TensorArchive::from_bytes(&bytes),
            Err(FcddError::VersionMismatch {
                found: 0,
                expected: ARCHIVE_VERSION
            })
        ));
    }
}
