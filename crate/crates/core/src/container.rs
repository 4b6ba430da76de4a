//! Byte layout shared by model and circuit files:
//!
//! ```text
//! magic        8 bytes
//! version      u32 little-endian
//! manifest_len u64 little-endian
//! manifest     UTF-8 JSON
//! blob_len     u64 little-endian
//! blob         little-endian tensors, referenced from the manifest by offset
//! checksum     SHA-256 of every preceding byte
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("manifest is not valid: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor {name} ({len} x {dtype:?}) at offset {offset} exceeds blob of {blob_len} bytes")]
    TensorBounds { name: String, dtype: DType, offset: u64, len: u64, blob_len: usize },
    #[error("tensor {name} has dtype {found:?}, expected {expected:?}")]
    DType { name: String, found: DType, expected: DType },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    I32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::I32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    pub dtype: DType,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Default)]
pub struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_i32(&mut self, values: &[i32]) -> TensorRef {
        let offset = self.bytes.len() as u64;
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorRef { dtype: DType::I32, offset, len: values.len() as u64 }
    }

    pub fn push_f64(&mut self, values: &[f64]) -> TensorRef {
        let offset = self.bytes.len() as u64;
        for v in values {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorRef { dtype: DType::F64, offset, len: values.len() as u64 }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

pub struct BlobReader<'a> {
    bytes: &'a [u8],
}

impl<'a> BlobReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    fn slice(&self, name: &str, r: &TensorRef, expected: DType) -> Result<&'a [u8], ContainerError> {
        if r.dtype != expected {
            return Err(ContainerError::DType { name: name.into(), found: r.dtype, expected });
        }
        let bounds = || ContainerError::TensorBounds {
            name: name.into(),
            dtype: r.dtype,
            offset: r.offset,
            len: r.len,
            blob_len: self.bytes.len(),
        };
        let start = usize::try_from(r.offset).map_err(|_| bounds())?;
        let n = usize::try_from(r.len).ok().and_then(|n| n.checked_mul(expected.width())).ok_or_else(bounds)?;
        let end = start.checked_add(n).ok_or_else(bounds)?;
        self.bytes.get(start..end).ok_or_else(bounds)
    }

    pub fn i32s(&self, name: &str, r: &TensorRef) -> Result<Vec<i32>, ContainerError> {
        let raw = self.slice(name, r, DType::I32)?;
        Ok(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn f64s(&self, name: &str, r: &TensorRef) -> Result<Vec<f64>, ContainerError> {
        let raw = self.slice(name, r, DType::F64)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn write(magic: &[u8; 8], version: u32, manifest: &[u8], blob: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 8 + manifest.len() + 8 + blob.len() + CHECKSUM_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Returns `(manifest, blob)` after checking magic, version and checksum.
pub fn read<'a>(magic: &[u8; 8], version: u32, bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8]), ContainerError> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(ContainerError::BadMagic { expected: String::from_utf8_lossy(magic).into_owned() });
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&'a [u8], ContainerError> {
        let s = bytes.get(pos..pos + n).ok_or(ContainerError::Truncated)?;
        pos += n;
        Ok(s)
    };
    let found = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if found != version {
        return Err(ContainerError::VersionMismatch { found, expected: version });
    }
    let manifest_len = usize::try_from(u64::from_le_bytes(take(8)?.try_into().unwrap())).map_err(|_| ContainerError::Truncated)?;
    let manifest = take(manifest_len)?;
    let blob_len = usize::try_from(u64::from_le_bytes(take(8)?.try_into().unwrap())).map_err(|_| ContainerError::Truncated)?;
    let blob = take(blob_len)?;
    let checksum = take(CHECKSUM_LEN)?;
    let body_end = pos - CHECKSUM_LEN;
    if pos != bytes.len() {
        return Err(ContainerError::ChecksumMismatch);
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != checksum {
        return Err(ContainerError::ChecksumMismatch);
    }
    Ok((manifest, blob))
}
