//! Parameter checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "MVRECKPT"
//! version      u32
//! manifest_len u64
//! manifest     manifest_len bytes of UTF-8 JSON
//! data         raw f64 arrays, one per parameter, at the manifest's offsets
//! ```
//!
//! Offsets in the manifest are relative to the start of the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MVRECKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub params: Vec<ManifestEntry>,
    /// Free-form model metadata (configuration, vocabularies).
    pub meta: serde_json::Value,
}

impl Manifest {
    pub fn has_param_with_prefix(&self, prefix: &str) -> bool {
        self.params.iter().any(|p| p.name.starts_with(prefix))
    }
}

pub fn to_bytes(store: &ParamStore, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (_, p) in store.iter() {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            frozen_rows: p.frozen_rows.clone(),
        });
        offset += 8 * p.value.len() as u64;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        params: entries,
        meta,
    };
    let json = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Validation(format!("checkpoint: {}", msg.into()))
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = 20usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..end])?;
    if manifest.format_version != version {
        return Err(corrupt("header and manifest versions disagree"));
    }
    Ok((manifest, end))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, Manifest)> {
    let (manifest, data_start) = read_manifest(bytes)?;
    let data = &bytes[data_start..];
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(corrupt(format!("data for `{}` out of bounds", e.name)));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let id = store.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?)?;
        store.get_mut(id).frozen_rows = e.frozen_rows.clone();
    }
    Ok((store, manifest))
}

pub fn save(path: &Path, store: &ParamStore, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(store, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load(path: &Path) -> Result<(ParamStore, Manifest)> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    from_bytes(&bytes)
}
