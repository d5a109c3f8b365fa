//! Checkpoint format: a single-line UTF-8 JSON header (schema version,
//! embedded network config, and a name -> shape/offset manifest) terminated
//! by '\n', followed by raw little-endian f32 parameter data in manifest
//! order. Save/load round-trips are bit-exact.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    shape: Vec<usize>,
    offset: u64,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    net_config: serde_json::Value,
    params: BTreeMap<String, ManifestEntry>,
}

pub fn save_checkpoint_writer(
    w: &mut impl Write,
    store: &ParamStore,
    net_config: &serde_json::Value,
) -> Result<()> {
    let mut params = BTreeMap::new();
    let mut offset = 0u64;
    for (name, p) in store.iter() {
        params.insert(
            name.clone(),
            ManifestEntry { shape: p.tensor.shape().to_vec(), offset, trainable: p.trainable },
        );
        offset += (p.tensor.numel() * 4) as u64;
    }
    let header =
        Header { schema_version: CHECKPOINT_SCHEMA_VERSION, net_config: net_config.clone(), params };
    let mut line = serde_json::to_string(&header)?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    for (_, p) in store.iter() {
        let mut bytes = Vec::with_capacity(p.tensor.numel() * 4);
        for &v in p.tensor.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    net_config: &serde_json::Value,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    save_checkpoint_writer(&mut f, store, net_config)
}

pub fn load_checkpoint_reader(r: &mut impl Read) -> Result<(ParamStore, serde_json::Value)> {
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let newline = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&raw[..newline])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported schema_version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    let data = &raw[newline + 1..];
    let mut store = ParamStore::new();
    let mut expected_len = 0u64;
    for (name, entry) in &header.params {
        let numel: usize = entry.shape.iter().product();
        let bytes = numel * 4;
        let start = entry.offset as usize;
        let end = start + bytes;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} extends past the data section ({end} > {})",
                data.len()
            )));
        }
        let mut values = Vec::with_capacity(numel);
        for chunk in data[start..end].chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        store.insert(name, Tensor::from_vec(&entry.shape, values)?, entry.trainable)?;
        expected_len = expected_len.max(end as u64);
    }
    if expected_len != data.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "data section has {} bytes, manifest covers {expected_len}",
            data.len()
        )));
    }
    Ok((store, header.net_config))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let mut f = std::fs::File::open(path)?;
    load_checkpoint_reader(&mut f)
}
