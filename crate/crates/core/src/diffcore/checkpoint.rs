//! Checkpoints are two files: `checkpoint.json`, an ordered index
//! `{name → {shape, offset, length}}`, and `checkpoint.bin`, the parameter
//! values as little-endian IEEE-754 doubles concatenated in index order.
//! `offset` is in bytes and `length` counts doubles.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "checkpoint.json";
pub const DATA_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

pub fn save_checkpoint(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = IndexMap::new();
    let mut bytes = Vec::with_capacity(store.num_scalars() * 8);
    for (name, t) in store.iter() {
        index.insert(
            name.to_string(),
            CheckpointEntry {
                shape: t.shape().to_vec(),
                offset: bytes.len(),
                length: t.len(),
            },
        );
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let idx_path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&idx_path, json + "\n").map_err(|e| Error::io(&idx_path, e))?;
    let bin_path = dir.join(DATA_FILE);
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let idx_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&idx_path).map_err(|e| Error::io(&idx_path, e))?;
    let index: IndexMap<String, CheckpointEntry> = serde_json::from_str(&text)?;
    let bin_path = dir.join(DATA_FILE);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let mut store = ParamStore::new();
    for (name, e) in index {
        let end = e.offset + e.length * 8;
        if end > bytes.len() || e.offset % 8 != 0 {
            return Err(Error::format(&bin_path, format!("entry `{name}` lies outside the data file")));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(name, Tensor::new(e.shape, data)?);
    }
    Ok(store)
}
