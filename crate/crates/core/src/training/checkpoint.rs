//! Checkpoint directory: `manifest.json` plus `tensors.bin`, the raw
//! little-endian f64 values of every tensor in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_json;
use crate::encoder::{EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::mcqa::Transcript;
use crate::numerics::Tensor;
use crate::rng::Stream;
use crate::training::plan::{Stage, Variant};
use crate::training::stages::TrainState;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: EncoderConfig,
    /// Last completed stage, if any.
    pub stage: Option<Stage>,
    pub completed: Vec<Stage>,
    pub step: u64,
    pub variant: Variant,
    pub transcript: Transcript,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let store = &state.params.store;
    let mut payload = Vec::with_capacity(store.total_values() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        });
        for v in p.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        config: state.params.config().clone(),
        stage: state.completed.last().copied(),
        completed: state.completed.clone(),
        step: state.step,
        variant: state.variant,
        transcript: state.transcript,
        tensors,
    };
    let path = dir.join(PAYLOAD_FILE);
    fs::write(&path, payload).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: version {}, expected {CHECKPOINT_VERSION}",
            path.display(),
            m.version
        )));
    }
    Ok(m)
}

/// Loads a checkpoint, checking every tensor against the layout its own
/// config implies.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    let config = manifest.config.clone();
    load_with_config(dir, manifest, &config)
}

/// Loads a checkpoint into a model built from `expected`; any tensor whose
/// shape disagrees is reported by name.
pub fn load_checkpoint_into(dir: &Path, expected: &EncoderConfig) -> Result<TrainState> {
    let manifest = read_manifest(dir)?;
    load_with_config(dir, manifest, expected)
}

fn load_with_config(dir: &Path, manifest: CheckpointManifest, config: &EncoderConfig) -> Result<TrainState> {
    let path = dir.join(PAYLOAD_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: payload of {} bytes is not a whole number of f64 values",
            path.display(),
            bytes.len()
        )));
    }
    let values = bytes.len() / 8;

    let mut params = ModelParams::init(config, Stream::new(0))?;
    if manifest.tensors.len() != params.store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, the model has {}",
            manifest.tensors.len(),
            params.store.len()
        )));
    }
    let ids: Vec<_> = params.store.ids().collect();
    let mut offset = 0usize;
    for (entry, id) in manifest.tensors.iter().zip(ids) {
        let want_name = params.store.name(id);
        if entry.name != want_name {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} found where the model expects {want_name:?}",
                entry.name
            )));
        }
        let want_shape = params.store.value(id).shape();
        if entry.shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, the model expects {want_shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = entry.shape.iter().product();
        if offset + n > values {
            return Err(Error::Checkpoint(format!(
                "payload ends inside tensor {} (needs values {}..{}, payload has {values})",
                entry.name,
                offset,
                offset + n
            )));
        }
        let data: Vec<f64> = bytes[offset * 8..(offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        params.store.set(id, t)?;
        offset += n;
    }
    if offset != values {
        let last = manifest.tensors.last().map_or("<none>", |t| t.name.as_str());
        return Err(Error::Checkpoint(format!(
            "payload has {} values beyond the last tensor {last}",
            values - offset
        )));
    }
    Ok(TrainState {
        params,
        completed: manifest.completed,
        step: manifest.step,
        variant: manifest.variant,
        transcript: manifest.transcript,
    })
}
