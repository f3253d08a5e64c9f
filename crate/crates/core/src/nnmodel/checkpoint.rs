//! Checkpoints are safetensors files. Every parameter is stored as
//! little-endian float32 under its dotted name; the header metadata holds
//! `format`, `config` (ModelConfig JSON), `step`, `stage`, `seed` (parameter
//! init seed) and `losses` (JSON array of per-step training losses).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::params::ParamStore;
use super::ModelConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "attrport-v1";

#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub step: usize,
    pub stage: u8,
    pub losses: Vec<f32>,
}

pub fn save_checkpoint(
    path: &Path,
    config: &ModelConfig,
    store: &ParamStore,
    step: usize,
    stage: u8,
    losses: &[f32],
) -> Result<()> {
    let mut buffers = Vec::with_capacity(store.len());
    for (name, var) in store.iter() {
        let values = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.to_string(), var.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (n.clone(), v)).map_err(ckpt_err)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("config".to_string(), serde_json::to_string(config)?);
    meta.insert("step".to_string(), step.to_string());
    meta.insert("stage".to_string(), stage.to_string());
    meta.insert("seed".to_string(), store.seed().to_string());
    meta.insert("losses".to_string(), serde_json::to_string(losses)?);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    safetensors::serialize_to_file(views, Some(meta), path).map_err(ckpt_err)
}

fn ckpt_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Loads every tensor into a store of the requested dtype.
pub fn load_checkpoint(path: &Path, dtype: DType) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(ckpt_err)?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata `{k}`", path.display())));
    let format = field("format")?;
    if format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {format}")));
    }
    let config: ModelConfig = serde_json::from_str(field("config")?)?;
    let step = field("step")?.parse().map_err(ckpt_err)?;
    let stage = field("stage")?.parse().map_err(ckpt_err)?;
    let losses: Vec<f32> = serde_json::from_str(field("losses")?)?;
    let seed = field("seed")?.parse().map_err(ckpt_err)?;

    let st = SafeTensors::deserialize(&bytes).map_err(ckpt_err)?;
    let mut store = ParamStore::new(dtype, seed);
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("tensor {name} has dtype {:?}", view.dtype())));
        }
        let values: Vec<f32> =
            view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.insert(&name, &Tensor::from_vec(values, view.shape(), &Device::Cpu)?)?;
    }
    Ok(Checkpoint { config, store, step, stage, losses })
}
