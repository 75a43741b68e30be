//! Model checkpoints: a directory holding `manifest.json` (architecture,
//! vocabulary, tensor table, schema version) and `params.bin`, the tensors
//! as 32-bit little-endian values, row-major, in manifest order.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{ArchConfig, Layout, ModelParams};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const BLOB_NAME: &str = "params.bin";
const MANIFEST_NAME: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    arch: ArchConfig,
    graphemes: Vec<String>,
    tensors: Vec<TensorEntry>,
}

fn ckpt_err(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

/// Writes `manifest.json` and `params.bin` into `dir` (created if needed).
pub fn save_checkpoint(params: &ModelParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let layout = &params.layout;
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        arch: layout.arch.clone(),
        graphemes: layout.graphemes.clone(),
        tensors: layout
            .specs
            .iter()
            .map(|s| TensorEntry { name: s.name.clone(), shape: [s.rows, s.cols] })
            .collect(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ckpt_err(format!("manifest encode: {e}")))?;
    fs::write(dir.join(MANIFEST_NAME), manifest_json)?;

    let mut w = BufWriter::new(File::create(dir.join(BLOB_NAME))?);
    for &v in &params.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint directory, verifying the tensor table against the
/// layout rebuilt from the manifest's architecture and vocabulary.
pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let manifest_raw = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let manifest: Manifest = serde_json::from_str(&manifest_raw)
        .map_err(|e| ckpt_err(format!("manifest decode: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(ckpt_err(format!(
            "unsupported schema version {}",
            manifest.schema_version
        )));
    }
    let layout = Layout::new(manifest.arch, manifest.graphemes)?;
    if manifest.tensors.len() != layout.specs.len() {
        return Err(ckpt_err(format!(
            "manifest lists {} tensors, architecture implies {}",
            manifest.tensors.len(),
            layout.specs.len()
        )));
    }
    for (entry, spec) in manifest.tensors.iter().zip(&layout.specs) {
        if entry.name != spec.name || entry.shape != [spec.rows, spec.cols] {
            return Err(ckpt_err(format!(
                "tensor {} with shape {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                spec.name,
                [spec.rows, spec.cols]
            )));
        }
    }

    let mut r = BufReader::new(File::open(dir.join(BLOB_NAME))?);
    let expected = layout.num_params();
    let mut blob = vec![0u8; expected * 4];
    r.read_exact(&mut blob).map_err(|_| ckpt_err("parameter blob is truncated"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ckpt_err("parameter blob has trailing bytes"));
    }
    let data: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(ModelParams { layout: Arc::new(layout), data })
}
