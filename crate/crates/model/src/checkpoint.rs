//! Versioned checkpoint container: a JSON header followed by raw
//! little-endian `f32` tensors in header order.
//!
//! Layout: magic `MRCK`, `u32` format version, `u64` header length, the
//! header, then the payload. Writes go to a temporary file that is renamed
//! into place.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::ModelConfig;

pub const MAGIC: &[u8; 4] = b"MRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// FNV-1a over the canonical JSON of the architecture config.
pub fn config_hash(model: &ModelConfig) -> String {
    let json = serde_json::to_string(model).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub model: ModelConfig,
    pub step: u64,
    /// Free-form training settings echoed for provenance.
    pub train: serde_json::Value,
    pub counters: Vec<(String, u64)>,
    pub tensors: Vec<TensorMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    header: &CheckpointHeader,
    tensors: &[(String, Vec<usize>, &[f32])],
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        let json = serde_json::to_vec(header)?;
        out.write_all(MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, _, data) in tensors {
            for v in data.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Reads a checkpoint; with `expected`, refuses a different architecture.
pub fn read_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<(CheckpointHeader, Vec<TensorRecord>), CheckpointError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input
        .read_exact(&mut json)
        .map_err(|_| CheckpointError::Corrupt("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if config_hash(&header.model) != header.config_hash {
        return Err(CheckpointError::Corrupt(
            "stored hash does not match stored config".into(),
        ));
    }
    if let Some(model) = expected {
        let want = config_hash(model);
        if want != header.config_hash {
            return Err(CheckpointError::ConfigHashMismatch {
                expected: want,
                found: header.config_hash,
            });
        }
    }
    let mut records = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        input
            .read_exact(&mut bytes)
            .map_err(|_| CheckpointError::Corrupt(format!("payload ends inside {}", meta.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(TensorRecord {
            name: meta.name.clone(),
            shape: meta.shape.clone(),
            data,
        });
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(model: ModelConfig, tensors: Vec<TensorMeta>) -> CheckpointHeader {
        CheckpointHeader {
            config_hash: config_hash(&model),
            model,
            step: 5,
            train: serde_json::json!({"k": 1}),
            counters: vec![("adam".into(), 5)],
            tensors,
        }
    }

    #[test]
    fn roundtrip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mrck");
        let a = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25];
        let metas = vec![TensorMeta {
            name: "a".into(),
            shape: vec![2, 2],
        }];
        let h = header(ModelConfig::default(), metas);
        write_checkpoint(&path, &h, &[("a".into(), vec![2, 2], &a)]).unwrap();
        let (h2, recs) = read_checkpoint(&path, Some(&ModelConfig::default())).unwrap();
        assert_eq!(h2, h);
        assert_eq!(
            recs[0].data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let other = ModelConfig {
            n_slices: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(
            read_checkpoint(&path, Some(&other)),
            Err(CheckpointError::ConfigHashMismatch { .. })
        ));

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path, None), Err(CheckpointError::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            read_checkpoint(&path, None),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_checkpoint(&path, None), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn hash_depends_on_architecture_only() {
        let a = ModelConfig::default();
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        let mut b = a.clone();
        b.generator.base_width = 8;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
