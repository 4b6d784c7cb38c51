//! Binary checkpoint: magic, a length-prefixed JSON manifest, then raw
//! little-endian `f64` parameter blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::model::DbrAfModel;
use crate::numkit::{RngState, Tensor};

use super::TrainConfig;

pub const MAGIC: &[u8; 8] = b"DBRAF001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: DbrAfModel,
    pub epoch: usize,
    pub best_valid: Option<f64>,
    pub rng: Vec<RngState>,
    pub norm: Option<NormStats>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    channels: usize,
    epoch: usize,
    best_valid: Option<f64>,
    rng: Vec<RngState>,
    norm: Option<NormStats>,
    flow_eval_permutations: Vec<Vec<Vec<usize>>>,
    params: Vec<ParamEntry>,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut params = Vec::new();
    let mut blob = Vec::new();
    for p in ck.model.params.iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ck.config.clone(),
        channels: ck.model.channels,
        epoch: ck.epoch,
        best_valid: ck.best_valid,
        rng: ck.rng.clone(),
        norm: ck.norm.clone(),
        flow_eval_permutations: ck.model.flow.as_ref().map(|f| f.eval_perms.clone()).unwrap_or_default(),
        params,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and rebuilds the model from its own config snapshot.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    load(path.as_ref(), None)
}

/// Loads a checkpoint into a model built from `cfg`; every parameter name
/// and shape must match.
pub fn load_checkpoint_with(path: impl AsRef<Path>, cfg: &TrainConfig) -> Result<Checkpoint> {
    load(path.as_ref(), Some(cfg))
}

fn load(path: &Path, cfg: Option<&TrainConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json_end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad(path, "truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..json_end]).map_err(|e| bad(path, format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(
            path,
            format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    let blob = &bytes[json_end..];
    let config = cfg.cloned().unwrap_or_else(|| manifest.config.clone());
    let mut model = DbrAfModel::new(&config, manifest.channels)?;

    for entry in &manifest.params {
        if model.params.index_of(&entry.name).is_none() {
            return Err(bad(
                path,
                format!("parameter {} (shape {:?}) is not part of the configured model", entry.name, entry.shape),
            ));
        }
    }
    for i in 0..model.params.len() {
        let p = model.params.get_mut(i);
        let entry = manifest
            .params
            .iter()
            .find(|e| e.name == p.name)
            .ok_or_else(|| {
                bad(
                    path,
                    format!("parameter {} (shape {:?}) missing from checkpoint", p.name, p.value.shape()),
                )
            })?;
        if entry.shape != p.value.shape() {
            return Err(bad(
                path,
                format!(
                    "parameter {} has shape {:?} in the checkpoint, the model expects {:?}",
                    p.name,
                    entry.shape,
                    p.value.shape()
                ),
            ));
        }
        let n = p.value.len();
        let end = entry
            .offset
            .checked_add(n * 8)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| bad(path, format!("truncated data for parameter {}", p.name)))?;
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        p.value = Tensor::new(entry.shape.clone(), data)?;
    }
    if let Some(f) = &model.flow {
        if f.eval_perms != manifest.flow_eval_permutations {
            return Err(bad(path, "flow evaluation permutations differ from the configured seed"));
        }
    }
    Ok(Checkpoint {
        config,
        model,
        epoch: manifest.epoch,
        best_valid: manifest.best_valid,
        rng: manifest.rng,
        norm: manifest.norm,
    })
}
