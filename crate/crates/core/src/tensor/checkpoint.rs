//! Checkpoints: `manifest.json` plus one little-endian `f32` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub blob: String,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(params: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len(),
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest { blob: BLOB_FILE.into(), params: entries };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        message: e.to_string(),
    })?;
    let bpath = dir.join(&manifest.blob);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut store = ParamStore::new();
    for entry in manifest.params {
        if entry.dtype != "f32" {
            return Err(Error::Parse {
                path: mpath.clone(),
                message: format!("{}: unsupported dtype `{}`", entry.name, entry.dtype),
            });
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + 4 * n;
        let bytes = blob.get(entry.offset..end).ok_or_else(|| Error::Parse {
            path: bpath.clone(),
            message: format!("{}: bytes {}..{end} beyond blob of {}", entry.name, entry.offset, blob.len()),
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    Ok(store)
}
