//! On-disk parameter format.
//!
//! A checkpoint is a directory holding `manifest.json` (UTF-8 JSON listing
//! each parameter's name, shape and byte offset) and `params.bin`, a single
//! blob of little-endian `f32` values in manifest order.
//!
//! Values are narrowed to `f32` on save, so a round trip is exact only up to
//! single precision.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dtype: String,
    pub entries: Vec<ManifestEntry>,
}

pub fn encode(params: &ParameterSet) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(params.num_weights() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        dtype: "f32le".to_string(),
        entries,
    };
    (manifest, blob)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ParameterSet> {
    if manifest.dtype != "f32le" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {}",
            manifest.dtype
        )));
    }
    let mut params = ParameterSet::new();
    for e in &manifest.entries {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let bytes = blob.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("`{}` runs past the end of the blob", e.name))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(params)
}

pub fn save(params: &ParameterSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode(params);
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<ParameterSet> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    decode(&manifest, &blob)
}
