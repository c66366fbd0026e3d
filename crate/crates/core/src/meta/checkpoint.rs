//! Checkpoint directory format.
//!
//! ```text
//! DIR/checkpoint.json   configuration, electrode map, parameter index, running statistics
//! DIR/params.f32        every parameter, little-endian f32, concatenated in index order
//! ```

use std::fs;
use std::path::Path;

use face_diffcore::{ParamSet, Partition, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::ElectrodeMap;
use crate::error::{FaceError, Result};
use crate::model::{Model, ModelConfig};
use crate::norm::BnRegistry;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    partition: String,
    /// Offset in f32 elements.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    config: ModelConfig,
    electrodes: ElectrodeMap,
    params: Vec<ParamEntry>,
    running: BnRegistry,
}

pub fn save_checkpoint(dir: &Path, model: &Model) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FaceError::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, p) in model.params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            partition: p.partition.as_str().to_string(),
            offset,
        });
        offset += p.tensor.numel();
        bytes.extend(p.tensor.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    let index = CheckpointIndex {
        config: model.config.clone(),
        electrodes: model.electrodes().clone(),
        params: entries,
        running: model.bn.clone(),
    };
    let raw = dir.join("params.f32");
    fs::write(&raw, bytes).map_err(|e| FaceError::io(&raw, e))?;
    let path = dir.join("checkpoint.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| FaceError::json(&path, e))?;
    fs::write(&path, text).map_err(|e| FaceError::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(|e| FaceError::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text).map_err(|e| FaceError::json(&path, e))?;
    let raw_path = dir.join("params.f32");
    let raw = fs::read(&raw_path).map_err(|e| FaceError::io(&raw_path, e))?;
    if raw.len() % 4 != 0 {
        return Err(FaceError::Load(format!(
            "{}: {} bytes is not a whole number of f32 values",
            raw_path.display(),
            raw.len()
        )));
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut params = ParamSet::new();
    for e in &index.params {
        let n: usize = e.shape.iter().product();
        let slice = values.get(e.offset..e.offset + n).ok_or_else(|| {
            FaceError::Load(format!("parameter `{}` runs past the end of params.f32", e.name))
        })?;
        let part = Partition::parse(&e.partition).ok_or_else(|| {
            FaceError::Load(format!("parameter `{}` has unknown partition `{}`", e.name, e.partition))
        })?;
        params.insert(&e.name, Tensor::new(e.shape.clone(), slice.to_vec())?, part)?;
    }
    Model::from_parts(index.config, index.electrodes, params, index.running)
}
