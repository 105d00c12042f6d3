//! Binary checkpoint container.
//!
//! Layout: `b"PMCK"`, `u32` version, `u64` header length, JSON header, then
//! every tensor in header order as little-endian `f32`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: Option<f64>,
    /// Input channel names, weather first.
    pub channels: Vec<String>,
    pub preset: Option<String>,
    pub region: Option<String>,
    /// Paths of the fitted statistics used for normalization and weighting.
    pub norm_stats: Option<String>,
    pub freq_tables: Option<String>,
    /// Free-form training settings.
    #[serde(default)]
    pub train: serde_json::Value,
    #[serde(default)]
    pub tensors: Vec<TensorInfo>,
}

impl CheckpointHeader {
    pub fn new(config: ModelConfig, channels: Vec<String>) -> Self {
        Self {
            seed: config.seed,
            config,
            epoch: 0,
            val_loss: None,
            channels,
            preset: None,
            region: None,
            norm_stats: None,
            freq_tables: None,
            train: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }
}

pub fn to_bytes(header: &CheckpointHeader, params: &ParamStore) -> Result<Vec<u8>> {
    let mut header = header.clone();
    header.tensors = params
        .params
        .iter()
        .map(|p| TensorInfo {
            name: p.name.clone(),
            shape: p.shape.clone(),
            decay: p.decay,
        })
        .collect();
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &params.params {
        for &v in &p.value {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointHeader, Model)> {
    let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut rest = &bytes[16 + hlen..];
    let mut store = ParamStore::default();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if rest.len() < 4 * n {
            return Err(bad(&format!("truncated tensor `{}`", t.name)));
        }
        let value = rest[..4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        rest = &rest[4 * n..];
        store.insert(&t.name, &t.shape, value, t.decay);
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let model = Model::from_params(header.config.clone(), store)?;
    Ok((header, model))
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &ParamStore) -> Result<()> {
    let bytes = to_bytes(header, params)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Model)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Rounds every parameter through `f32`, matching what a checkpoint stores.
pub fn round_to_f32(params: &mut ParamStore) {
    for p in &mut params.params {
        for v in &mut p.value {
            *v = *v as f32 as f64;
        }
    }
}
