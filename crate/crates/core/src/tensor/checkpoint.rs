//! Tensor checkpoint files.
//!
//! A checkpoint is a JSON manifest (`<stem>.json`) plus one raw
//! little-endian blob (`<stem>.bin`). Each manifest entry records the
//! tensor name, shape, dtype and byte offset into the blob. A tensor is
//! written as `f32` when every value is exactly representable in 32 bits
//! and as `f64` otherwise, so loading always reproduces the saved bits.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT: &str = "fedyolo-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: usize,
    #[serde(default)]
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub blob: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header: Option<serde_json::Value>,
    pub tensors: Vec<ManifestEntry>,
}

/// One named tensor to be written.
pub struct Record<'a> {
    pub name: &'a str,
    pub tensor: &'a Tensor,
    pub frozen: bool,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn pick_dtype(t: &Tensor) -> Dtype {
    if t.data().iter().all(|&x| (x as f32) as f64 == x) {
        Dtype::F32
    } else {
        Dtype::F64
    }
}

/// Writes `records` to `manifest` and its sibling `.bin` file.
pub fn save<'a>(manifest: &Path, records: impl IntoIterator<Item = Record<'a>>, header: Option<serde_json::Value>) -> Result<Manifest> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for rec in records {
        let dtype = pick_dtype(rec.tensor);
        tensors.push(ManifestEntry {
            name: rec.name.to_string(),
            shape: rec.tensor.shape().to_vec(),
            dtype,
            offset: blob.len(),
            frozen: rec.frozen,
        });
        match dtype {
            Dtype::F32 => blob.extend(rec.tensor.data().iter().flat_map(|&x| (x as f32).to_le_bytes())),
            Dtype::F64 => blob.extend(rec.tensor.data().iter().flat_map(|&x| x.to_le_bytes())),
        }
    }
    let bin = blob_path(manifest);
    let m = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        blob: bin.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        header,
        tensors,
    };
    if let Some(parent) = manifest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_vec_pretty(&m)?;
    fs::write(manifest, json).map_err(|e| Error::io(manifest, e))?;
    Ok(m)
}

/// Reads a checkpoint written by [`save`].
pub fn load(manifest: &Path) -> Result<(Manifest, Vec<(ManifestEntry, Tensor)>)> {
    let text = fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Format {
        path: manifest.to_path_buf(),
        reason: e.to_string(),
    })?;
    let fmt_err = |reason: String| Error::Format {
        path: manifest.to_path_buf(),
        reason,
    };
    if m.format != FORMAT || m.version != VERSION {
        return Err(fmt_err(format!(
            "unsupported format {} v{} (expected {FORMAT} v{VERSION})",
            m.format, m.version
        )));
    }
    let bin = manifest.with_file_name(&m.blob);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut out = Vec::with_capacity(m.tensors.len());
    for entry in &m.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * entry.dtype.width();
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| fmt_err(format!("tensor `{}` runs past end of blob", entry.name)))?;
        let data: Vec<f64> = match entry.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| fmt_err(format!("tensor `{}`: {e}", entry.name)))?;
        out.push((entry.clone(), t));
    }
    Ok((m, out))
}
