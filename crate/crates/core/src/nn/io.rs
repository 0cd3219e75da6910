//! Weight files: a flat little-endian float64 blob plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelParams, NnError, Sequential, Tensor};

pub const WEIGHTS_FORMAT: &str = "tracerseg-weights-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format: String,
    pub architecture: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub seed: u64,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorRecord>,
}

/// Blob path paired with a manifest path: `model.json` → `model.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Write `<path>` (manifest) and its `.bin` blob.
pub fn save_model(model: &Sequential, manifest_path: impl AsRef<Path>) -> Result<(), NnError> {
    let manifest_path = manifest_path.as_ref();
    let blob = blob_path(manifest_path);
    let mut bytes = Vec::with_capacity(model.params().scalar_count() * 8);
    let mut tensors = Vec::new();
    for e in model.params().iter() {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in e.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = WeightsManifest {
        format: WEIGHTS_FORMAT.into(),
        architecture: model.layers().to_vec(),
        input_shape: model.input_shape().to_vec(),
        seed: model.seed(),
        blob: blob.file_name().unwrap().to_string_lossy().into_owned(),
        tensors,
    };
    let io = |e: std::io::Error| NnError::Io(format!("{}: {e}", manifest_path.display()));
    fs::write(&blob, bytes).map_err(io)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| NnError::Manifest(e.to_string()))?;
    fs::write(manifest_path, json + "\n").map_err(io)
}

pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<Sequential, NnError> {
    let manifest_path = manifest_path.as_ref();
    let io = |e: std::io::Error| NnError::Io(format!("{}: {e}", manifest_path.display()));
    let text = fs::read_to_string(manifest_path).map_err(io)?;
    let manifest: WeightsManifest = serde_json::from_str(&text).map_err(|e| NnError::Manifest(e.to_string()))?;
    if manifest.format != WEIGHTS_FORMAT {
        return Err(NnError::Manifest(format!("unknown weights format '{}'", manifest.format)));
    }
    let blob_file = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob_file).map_err(|e| NnError::Io(format!("{}: {e}", blob_file.display())))?;
    let mut params = ModelParams::default();
    for rec in &manifest.tensors {
        let n: usize = rec.shape.iter().product();
        let end = rec.offset + 8 * n;
        if rec.offset % 8 != 0 || end > bytes.len() {
            return Err(NnError::Manifest(format!(
                "tensor {} [{}..{end}) lies outside the {}-byte blob",
                rec.name,
                rec.offset,
                bytes.len()
            )));
        }
        let data = bytes[rec.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(rec.name.clone(), Tensor::new(rec.shape.clone(), data)?);
    }
    Sequential::from_parts(manifest.architecture, manifest.input_shape, params, manifest.seed)
}
