//! Single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "CGPCKPT1"
//! u64       manifest length in bytes
//! ...       manifest, UTF-8 JSON (see `Manifest`)
//! ...       f64 values of every parameter, in manifest order, row-major
//! ```

use crate::autodiff::ParamSet;
use crate::network::{Model, ModelConfig, ModelKind, NetworkError, INPUT_DIM, NUM_LAYERS};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CGPCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("bad manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub num_classes: usize,
    pub components: usize,
    pub hidden: usize,
    pub layers: usize,
    pub input_dim: usize,
    pub params: Vec<ParamEntry>,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let c = model.config;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: c.kind,
        num_classes: c.num_classes,
        components: c.components,
        hidden: c.hidden,
        layers: NUM_LAYERS,
        input_dim: INPUT_DIM,
        params: model
            .params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.iter() {
        for &x in p.value.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Model, CheckpointError> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or(CheckpointError::Truncated("manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    let mut data = &bytes[16 + len..];
    let mut params = ParamSet::new();
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        if data.len() < 8 * n {
            return Err(CheckpointError::Truncated("parameter data"));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        data = &data[8 * n..];
        let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("sized above");
        params
            .insert(entry.name.clone(), value)
            .map_err(NetworkError::from)?;
    }
    let config = ModelConfig::new(manifest.kind, manifest.num_classes, manifest.components, manifest.hidden);
    Ok(Model::from_params(config, params)?)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    decode(&std::fs::read(path)?)
}
