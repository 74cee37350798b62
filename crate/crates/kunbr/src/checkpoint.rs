//! Model checkpoint container: magic bytes, a length-prefixed JSON header
//! describing the config and tensor index, then raw little-endian tensor
//! payloads in index order. Round trips are bit-exact at f64 precision.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"KUNBR001";

/// Stored scalar width. f64 round trips exactly; f32 narrows the payload
/// (arithmetic is always performed in f64 after loading).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(&self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Result<Precision> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Validation(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorIndexEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub precision: Precision,
    pub tensors: Vec<TensorIndexEntry>,
}

/// Serializes a model to the container format.
pub fn to_bytes(model: &ParameterStore, precision: Precision) -> Result<Vec<u8>> {
    let dtype = match precision {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for (name, t) in &model.params {
        tensors.push(TensorIndexEntry {
            name: name.clone(),
            dtype: dtype.to_string(),
            shape: t.shape.clone(),
            byte_offset: offset,
        });
        offset += (t.len() * precision.bytes()) as u64;
    }
    let header = CheckpointHeader {
        schema_version: 1,
        config: model.config.clone(),
        precision,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in model.params.values() {
        match precision {
            Precision::F64 => {
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Precision::F32 => {
                for v in &t.data {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// Parses the container format back into a model.
pub fn from_bytes(bytes: &[u8]) -> Result<ParameterStore> {
    let need = |expected: usize| -> Result<()> {
        if bytes.len() < expected {
            Err(Error::Checkpoint(format!(
                "truncated checkpoint: expected ≥ {expected} bytes, found {}",
                bytes.len()
            )))
        } else {
            Ok(())
        }
    };
    need(16)?;
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic: expected {MAGIC:?}, found {:?}",
            &bytes[..8]
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    need(16 + header_len)?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("header parse failed: {e}")))?;
    if header.schema_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported schema version {}",
            header.schema_version
        )));
    }
    header.config.validate()?;
    let payload = &bytes[16 + header_len..];
    let width = header.precision.bytes();
    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * width)
        .sum();
    if payload.len() != total {
        return Err(Error::Checkpoint(format!(
            "payload size mismatch: expected {total} bytes, found {}",
            payload.len()
        )));
    }
    let mut params = BTreeMap::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + n * width;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} extends to byte {end}, payload has {}",
                entry.name,
                payload.len()
            )));
        }
        let raw = &payload[start..end];
        let data: Vec<f64> = match header.precision {
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        params.insert(entry.name.clone(), Tensor {
            shape: entry.shape.clone(),
            data,
        });
    }
    let model = ParameterStore {
        config: header.config,
        params,
    };
    model.check_shapes()?;
    Ok(model)
}

/// Atomic save: write to a temp file in the target directory, then rename.
pub fn save(model: &ParameterStore, precision: Precision, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, precision)?;
    crate::cli::write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<ParameterStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// SHA-256 of a file's contents, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let mut f = std::fs::File::open(path)?;
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn model() -> ParameterStore {
        init_model(&ModelConfig {
            h_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab: 144,
            ctx: 16,
            seed: 42,
        })
        .unwrap()
    }

    #[test]
    fn f64_round_trip_is_bit_exact_and_stable() {
        let m = model();
        let bytes = to_bytes(&m, Precision::F64).unwrap();
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(loaded.digest(), m.digest());
        // save∘load∘save yields identical bytes.
        assert_eq!(to_bytes(&loaded, Precision::F64).unwrap(), bytes);
    }

    #[test]
    fn f32_round_trip_narrows_but_parses() {
        let m = model();
        let bytes = to_bytes(&m, Precision::F32).unwrap();
        let loaded = from_bytes(&bytes).unwrap();
        assert_eq!(loaded.config, m.config);
        for (name, t) in &m.params {
            for (a, b) in t.data.iter().zip(loaded.get(name).data.iter()) {
                assert!((a - b).abs() <= f32::EPSILON as f64 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn truncation_reports_expected_vs_actual() {
        let m = model();
        let bytes = to_bytes(&m, Precision::F64).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected") && msg.contains("found"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let m = model();
        let mut bytes = to_bytes(&m, Precision::F64).unwrap();
        bytes[0] ^= 0xFF;
        assert!(from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn file_round_trip_via_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.kunbr");
        let m = model();
        save(&m, Precision::F64, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.digest(), m.digest());
        let h1 = file_sha256(&path).unwrap();
        save(&m, Precision::F64, &path).unwrap();
        assert_eq!(file_sha256(&path).unwrap(), h1);
    }
}
