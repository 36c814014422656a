//! Checkpoint directories: `manifest.json` plus one raw little-endian `f32`
//! file per parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::refiners::{Model, ModelConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub byte_order: String,
    pub step: u64,
    pub config: ModelConfig,
    /// Free-form settings that produced the checkpoint.
    #[serde(default)]
    pub training: serde_json::Value,
    pub parameters: Vec<ParamEntry>,
}

fn file_name(i: usize, name: &str) -> String {
    format!("{i:03}_{}.bin", name.replace(|c: char| !c.is_ascii_alphanumeric() && c != '.' && c != '_', "_"))
}

pub fn save_checkpoint(model: &Model<f32>, step: u64, training: serde_json::Value, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parameters = Vec::with_capacity(model.store.len());
    for (i, p) in model.store.iter().enumerate() {
        let file = file_name(i, &p.name);
        let bytes: Vec<u8> = p.value.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        parameters.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape.clone(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        byte_order: "little-endian".into(),
        step,
        config: model.config.clone(),
        training,
        parameters,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version:?}, expected {FORMAT_VERSION}"
        )));
    }
    let m: Manifest = serde_json::from_value(raw).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    if m.dtype != "f32" || m.byte_order != "little-endian" {
        return Err(Error::Checkpoint(format!("unsupported encoding {} {}", m.dtype, m.byte_order)));
    }
    Ok(m)
}

/// Loads a checkpoint using the configuration it records.
pub fn load_checkpoint(dir: &Path) -> Result<(Model<f32>, Manifest)> {
    let m = read_manifest(dir)?;
    let model = load_checkpoint_as(dir, &m.config)?;
    Ok((model, m))
}

/// Loads a checkpoint into the structure described by `config`; every
/// parameter must be present exactly once with the expected shape.
pub fn load_checkpoint_as(dir: &Path, config: &ModelConfig) -> Result<Model<f32>> {
    let m = read_manifest(dir)?;
    let mut model = Model::<f32>::new(config.clone())?;
    if m.config.kind != config.kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {} model, expected {}",
            m.config.kind, config.kind
        )));
    }
    let mut seen = vec![false; model.store.len()];
    for entry in &m.parameters {
        let id = model
            .store
            .find(&entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", entry.name)))?;
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(Error::Checkpoint(format!("parameter {} listed twice", entry.name)));
        }
        let expected = &model.store.get(id).value.shape;
        if &entry.shape != expected {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {}: checkpoint {:?}, model {:?}",
                entry.name, entry.shape, expected
            )));
        }
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with('.') {
            return Err(Error::Checkpoint(format!("bad parameter file name {}", entry.file)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n: usize = expected.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::Checkpoint(format!(
                "{} holds {} bytes, expected {}",
                entry.file,
                bytes.len(),
                4 * n
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite values in {}", entry.name)));
        }
        model.store.get_mut(id).value.data = data;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!(
            "missing parameter {}",
            model.store.get(ParamId(i)).name
        )));
    }
    Ok(model)
}
