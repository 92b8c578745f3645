//! Checkpoint container.
//!
//! Layout: the 8 magic bytes `DFQCKPT1`, a little-endian `u64` manifest
//! length, the JSON manifest, then one little-endian `f64` payload. Tensor
//! offsets in the manifest are byte offsets into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::{Param, ViTConfig, ViTModel};

pub const MAGIC: &[u8; 8] = b"DFQCKPT1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: ViTConfig,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
    /// Optional per-site quantizer section.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<serde_json::Value>,
}

/// A decoded checkpoint: the model and, for quantized checkpoints, the raw
/// quantizer section.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointContents {
    pub model: ViTModel,
    pub quant: Option<serde_json::Value>,
}

/// Encodes a checkpoint to bytes.
pub fn write_checkpoint(model: &ViTModel, quant: Option<serde_json::Value>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, p) in model.weights.named() {
        tensors.push(TensorEntry {
            name,
            shape: p.shape.clone(),
            offset: payload.len() as u64,
            len: p.data.len() as u64,
        });
        for v in &p.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: VERSION,
        config: model.config,
        tensors,
        payload_bytes: payload.len() as u64,
        quant,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes checkpoint bytes. `origin` only labels errors.
pub fn read_checkpoint(bytes: &[u8], origin: &Path) -> Result<CheckpointContents> {
    let corrupt = |reason: String| Error::Checkpoint {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(corrupt(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + mlen {
        return Err(corrupt("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..16 + mlen]).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.version != VERSION {
        return Err(corrupt(format!("unknown version {}", manifest.version)));
    }
    manifest.config.validate()?;
    let payload = &bytes[16 + mlen..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(corrupt(format!(
            "payload is {} bytes, manifest says {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    let expected = ViTModel::layout(&manifest.config)?;
    if expected.len() != manifest.tensors.len() {
        return Err(corrupt(format!(
            "manifest lists {} tensors, config needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut model = ViTModel::init(manifest.config, 0)?;
    for ((name, param), entry) in model.weights.named_mut().into_iter().zip(&manifest.tensors) {
        if entry.name != name || entry.shape != param.shape {
            return Err(corrupt(format!(
                "tensor {} {:?} where {name} {:?} expected",
                entry.name, entry.shape, param.shape
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize * 8;
        if entry.len as usize != param.data.len() || end > payload.len() {
            return Err(corrupt(format!("tensor {name} exceeds payload")));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *param = Param::new(entry.shape.clone(), data);
    }
    Ok(CheckpointContents {
        model,
        quant: manifest.quant,
    })
}

pub fn save_checkpoint(model: &ViTModel, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model, None)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ViTModel> {
    Ok(read_checkpoint(&fs::read(path)?, path)?.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ViTModel {
        let cfg = ViTConfig {
            image_size: 8,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            ..ViTConfig::default()
        };
        ViTModel::init(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        for ((_, a), (_, b)) in m.weights.named().iter().zip(back.weights.named()) {
            let ab: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(m, back);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = write_checkpoint(&small(), None).unwrap();
        for cut in [4, 20, bytes.len() - 8] {
            let err = read_checkpoint(&bytes[..cut], Path::new("x")).unwrap_err();
            assert!(matches!(err, Error::Checkpoint { .. }), "{err}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = write_checkpoint(&small(), None).unwrap();
        bytes[0] = b'X';
        assert!(read_checkpoint(&bytes, Path::new("x")).unwrap_err().to_string().contains("magic"));

        let m = small();
        let bytes = write_checkpoint(&m, None).unwrap();
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
        manifest["version"] = 7.into();
        let err = read_checkpoint(&rebuild(&manifest, &bytes[16 + mlen..]), Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("unknown version"));
    }

    fn rebuild(manifest: &serde_json::Value, payload: &[u8]) -> Vec<u8> {
        let json = serde_json::to_vec(manifest).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn tensor_count_mismatch() {
        let bytes = write_checkpoint(&small(), None).unwrap();
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut manifest: serde_json::Value = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
        manifest["tensors"].as_array_mut().unwrap().pop();
        let err = read_checkpoint(&rebuild(&manifest, &bytes[16 + mlen..]), Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("tensors"), "{err}");
    }

    #[test]
    fn quant_section_survives() {
        let q = serde_json::json!({"sites": [1, 2, 3]});
        let bytes = write_checkpoint(&small(), Some(q.clone())).unwrap();
        assert_eq!(read_checkpoint(&bytes, Path::new("x")).unwrap().quant, Some(q));
    }
}
