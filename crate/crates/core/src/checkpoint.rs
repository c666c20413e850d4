//! Tensor archive: a JSON manifest plus a flat binary payload.
//!
//! `<stem>.json` lists every tensor's name, shape, byte offset and element
//! count; `<stem>.bin` holds the elements as little-endian `f64`,
//! concatenated in manifest order. Reading back is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingModel, ModelConfig, ModelError};
use crate::tensor::Tensor;

pub const FORMAT: &str = "domaug-tensors";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: malformed archive: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Number of elements.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub payload: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

pub fn payload_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.bin"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `tensors` as `<dir>/<stem>.json` + `<dir>/<stem>.bin`.
pub fn write_tensors(
    dir: &Path,
    stem: &str,
    tensors: &[(String, &Tensor)],
    metadata: serde_json::Value,
) -> Result<Manifest, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            offset: payload.len() as u64,
            length: t.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        payload: format!("{stem}.bin"),
        tensors: entries,
        metadata,
    };
    let bin = payload_path(dir, stem);
    fs::write(&bin, &payload).map_err(io_err(&bin))?;
    let json = manifest_path(dir, stem);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| CheckpointError::Json {
        path: json.clone(),
        source,
    })?;
    fs::write(&json, text + "\n").map_err(io_err(&json))?;
    Ok(manifest)
}

/// Reads an archive written by [`write_tensors`].
pub fn read_tensors(
    dir: &Path,
    stem: &str,
) -> Result<(Manifest, Vec<(String, Tensor)>), CheckpointError> {
    let json = manifest_path(dir, stem);
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
            path: json.clone(),
            source,
        })?;
    let bad = |reason: String| CheckpointError::Format {
        path: json.clone(),
        reason,
    };
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(bad(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let bin = dir.join(&manifest.payload);
    let payload = fs::read(&bin).map_err(io_err(&bin))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != DTYPE {
            return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let start = e.offset as usize;
        let end = start + 8 * e.length as usize;
        if end > payload.len() {
            return Err(bad(format!(
                "{}: bytes {start}..{end} past end of payload",
                e.name
            )));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t =
            Tensor::new(e.shape.clone(), data).map_err(|err| bad(format!("{}: {err}", e.name)))?;
        out.push((e.name.clone(), t));
    }
    Ok((manifest, out))
}

/// Saves a model with its config in the manifest metadata.
pub fn save_model(
    dir: &Path,
    stem: &str,
    model: &EmbeddingModel,
) -> Result<Manifest, CheckpointError> {
    let named: Vec<(String, &Tensor)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), &p.value))
        .collect();
    let meta = serde_json::json!({ "model": model.config() });
    write_tensors(dir, stem, &named, meta)
}

pub fn load_model(dir: &Path, stem: &str) -> Result<EmbeddingModel, CheckpointError> {
    let (manifest, tensors) = read_tensors(dir, stem)?;
    let cfg: ModelConfig =
        serde_json::from_value(manifest.metadata["model"].clone()).map_err(|source| {
            CheckpointError::Json {
                path: manifest_path(dir, stem),
                source,
            }
        })?;
    Ok(EmbeddingModel::from_named(cfg, tensors)?)
}
