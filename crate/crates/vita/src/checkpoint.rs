//! Checkpoint container: a directory holding `manifest.json` — format
//! version, architecture, tensor table (name, shape, dtype, byte offset),
//! and a caller-provided metadata blob (training config snapshot,
//! normalization statistics) — next to `params.bin`, one raw little-endian
//! IEEE-754 data file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{ArchConfig, ModelParams};
use crate::error::{Result, VitaError};
use crate::numerics::rng;
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "params.bin";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arch: ArchConfig,
    tensors: Vec<TensorEntry>,
    /// Training config snapshot plus whatever the producer wants loaders
    /// to see (e.g. normalization statistics).
    extra: serde_json::Value,
}

/// Write `params` and `extra` metadata into `dir` (created if needed).
pub fn save_checkpoint(dir: &Path, params: &ModelParams, extra: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let named = params.named_tensors();
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(named.len());
    for (name, tensor) in &named {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len() as u64,
        });
        for x in tensor.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        arch: params.arch.clone(),
        tensors: entries,
        extra: extra.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join(DATA_FILE), blob)?;
    Ok(())
}

/// Load a checkpoint directory back into model parameters plus the stored
/// metadata blob.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, serde_json::Value)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(VitaError::InvalidData(format!(
            "checkpoint format version {} unsupported (expected {})",
            manifest.format_version, FORMAT_VERSION
        )));
    }
    let blob = fs::read(dir.join(DATA_FILE))?;

    // Shape scaffold with the right architecture; every tensor is then
    // overwritten from the data file.
    let mut params = ModelParams::init(manifest.arch.clone(), &mut rng::seeded(0))?;
    let mut filled = 0usize;
    {
        let mut named = params.named_tensors_mut();
        for entry in &manifest.tensors {
            let slot = named
                .iter_mut()
                .find(|(name, _)| name == &entry.name)
                .ok_or_else(|| {
                    VitaError::InvalidData(format!("unknown tensor {} in checkpoint", entry.name))
                })?;
            if entry.dtype != "f64" {
                return Err(VitaError::InvalidData(format!(
                    "tensor {} dtype {} unsupported",
                    entry.name, entry.dtype
                )));
            }
            if slot.1.shape() != entry.shape.as_slice() {
                return Err(VitaError::InvalidData(format!(
                    "tensor {} shape {:?} does not match architecture shape {:?}",
                    entry.name,
                    entry.shape,
                    slot.1.shape()
                )));
            }
            let n = slot.1.len();
            let start = entry.offset as usize;
            let end = start + 8 * n;
            if end > blob.len() {
                return Err(VitaError::InvalidData(format!(
                    "tensor {} overruns data file",
                    entry.name
                )));
            }
            let mut values = Vec::with_capacity(n);
            for chunk in blob[start..end].chunks_exact(8) {
                values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            *slot.1 = Tensor::new(entry.shape.clone(), values);
            filled += 1;
        }
        if filled != named.len() {
            return Err(VitaError::InvalidData(format!(
                "checkpoint provides {} tensors, model needs {}",
                filled,
                named.len()
            )));
        }
    }
    Ok((params, manifest.extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits_and_extra() {
        let arch = ArchConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_mlp: 32,
            max_len: 8,
            ..ArchConfig::default()
        };
        let params = ModelParams::init(arch, &mut rng::seeded(42)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let extra = serde_json::json!({"seed": 42, "note": "test"});
        save_checkpoint(dir.path(), &params, &extra).unwrap();

        let (loaded, extra_back) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(extra, extra_back);
        for ((na, ta), (nb, tb)) in params.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(na, &nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u64> = ta.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "tensor {} changed", na);
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let arch = ArchConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_mlp: 32,
            max_len: 8,
            ..ArchConfig::default()
        };
        let params = ModelParams::init(arch, &mut rng::seeded(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &serde_json::Value::Null).unwrap();

        let path = dir.path().join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
