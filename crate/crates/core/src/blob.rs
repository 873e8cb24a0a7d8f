//! Float blob files: a JSON manifest next to a raw little-endian f32 payload.
//!
//! The manifest records `rows`, `dim`, `dtype: "f32le"` and the payload file
//! name (relative to the manifest). Model checkpoints reuse the same payload
//! encoding for their parameter blobs.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobManifest {
    pub rows: usize,
    pub dim: usize,
    pub dtype: String,
    pub payload: String,
}

/// Write `data` (row-major, `rows * dim` values) as manifest + payload.
///
/// `manifest_path` should end in `.json`; the payload lands next to it with
/// the extension swapped for `.bin`.
pub fn write_matrix(manifest_path: &Path, rows: usize, dim: usize, data: &[f64]) -> Result<()> {
    assert_eq!(data.len(), rows * dim, "payload size mismatch");
    let payload_path = manifest_path.with_extension("bin");
    let payload_name = payload_path
        .file_name()
        .expect("payload file name")
        .to_string_lossy()
        .into_owned();
    let manifest = BlobManifest {
        rows,
        dim,
        dtype: "f32le".to_string(),
        payload: payload_name,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, json).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    write_f32_payload(&payload_path, data)
}

/// Read a manifest + payload pair back into row-major f64 data.
pub fn read_matrix(manifest_path: &Path) -> Result<(BlobManifest, Vec<f64>)> {
    let json = fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: BlobManifest = serde_json::from_str(&json)?;
    if manifest.dtype != "f32le" {
        return Err(Error::Schema(format!(
            "unsupported dtype {:?} in {}",
            manifest.dtype,
            manifest_path.display()
        )));
    }
    let payload_path = sibling(manifest_path, &manifest.payload);
    let data = read_f32_payload(&payload_path, manifest.rows * manifest.dim)?;
    Ok((manifest, data))
}

pub fn write_f32_payload(path: &Path, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_f32_payload(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.len() != expected_len * 4 {
        return Err(Error::Schema(format!(
            "payload {} has {} bytes, expected {}",
            path.display(),
            buf.len(),
            expected_len * 4
        )));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn sibling(manifest_path: &Path, name: &str) -> PathBuf {
    manifest_path
        .parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}
