use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::features::Normalizer;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON half of a checkpoint; the values live in a sibling `.bin` file as
/// little-endian `f32`: every parameter in order, then each batch-norm
/// layer's running mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub config_name: String,
    pub config: ModelConfig,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub blob: String,
    pub params: Vec<ParamEntry>,
    /// Channel count of each batch-norm layer.
    pub running_stats: Vec<usize>,
    pub normalizer: Option<Normalizer>,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

pub fn save_checkpoint(model: &Model, normalizer: Option<&Normalizer>, path: &Path) -> Result<()> {
    let blob = blob_path(path);
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        config_name: model.name.clone(),
        config: model.config.clone(),
        n: model.n,
        d: model.d,
        seed: model.seed,
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        params: model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .map(|(name, t)| ParamEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
        running_stats: model.running.iter().map(|r| r.mean.len()).collect(),
        normalizer: normalizer.cloned(),
    };
    let mut bytes = Vec::with_capacity(4 * model.params.numel());
    let values = model
        .params
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .chain(model.running.iter().flat_map(|r| r.mean.iter().chain(&r.var)));
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(&blob, bytes).map_err(Error::io(&blob))?;
    let json = serde_json::to_string_pretty(&manifest).map_err(Error::json(path))?;
    fs::write(path, json + "\n").map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<Normalizer>)> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(Error::json(path))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
    }
    let mut model = Model::new(
        &manifest.config_name,
        manifest.config.clone(),
        manifest.n,
        manifest.d,
        manifest.seed,
    )?;
    let layout_matches = model.params.len() == manifest.params.len()
        && model
            .params
            .names()
            .iter()
            .zip(model.params.tensors())
            .zip(&manifest.params)
            .all(|((name, t), e)| *name == e.name && t.shape == e.shape)
        && model.running.iter().map(|r| r.mean.len()).eq(manifest.running_stats.iter().copied());
    if !layout_matches {
        return Err(Error::Checkpoint(
            "parameter layout differs from the configuration".into(),
        ));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob).map_err(Error::io(&blob))?;
    let expected = model.params.numel() + manifest.running_stats.iter().map(|c| 2 * c).sum::<usize>();
    if bytes.len() != 4 * expected {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, expected {}",
            blob.display(),
            bytes.len(),
            4 * expected
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    for t in model.params.tensors_mut() {
        for v in &mut t.data {
            *v = values.next().expect("length checked");
        }
    }
    for r in &mut model.running {
        for v in r.mean.iter_mut().chain(r.var.iter_mut()) {
            *v = values.next().expect("length checked");
        }
    }
    Ok((model, manifest.normalizer))
}
