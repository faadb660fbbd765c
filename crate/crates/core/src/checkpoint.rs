//! Checkpoint directories: `manifest.json` describing every tensor and
//! `tensors.bin`, an 8-byte magic followed by little-endian f64 values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::PrpModel;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"PRPCKPT1";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: bad magic, not a checkpoint")]
    BadMagic { path: PathBuf },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("tensor `{name}`: {message}")]
    Tensor { name: String, message: String },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in bytes from the start of `tensors.bin`.
    pub offset: usize,
    /// Number of f64 values.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// Training epoch the parameters were taken from.
    pub epoch: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub config: TrainConfig,
    pub tensors: Vec<TensorEntry>,
}

/// Hex SHA-256 of the canonical (compact) JSON form of the config.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_owned(),
        source,
    }
}

pub fn save(dir: &Path, model: &PrpModel, config: &TrainConfig, epoch: usize) -> Result<Manifest, CheckpointError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut blob = MAGIC.to_vec();
    let mut tensors = Vec::new();
    for (_, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: blob.len(),
            len: t.values.len(),
        });
        for v in &t.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        magic: String::from_utf8_lossy(MAGIC).into_owned(),
        version: FORMAT_VERSION,
        config_hash: config_hash(config),
        seed: config.seed,
        epoch,
        n_users: model.emb.n_users,
        n_items: model.emb.n_items,
        dim: model.dim(),
        config: config.clone(),
        tensors,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(io(&blob_path))?;
    let man_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&man_path, text + "\n").map_err(io(&man_path))?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(PrpModel, Manifest), CheckpointError> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(io(&man_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CheckpointError::Manifest {
        path: man_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.magic.as_bytes() != MAGIC {
        return Err(CheckpointError::BadMagic { path: man_path });
    }
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.version));
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(io(&blob_path))?;
    if blob.len() < MAGIC.len() || &blob[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic { path: blob_path });
    }

    let mut model = PrpModel::new(manifest.n_users, manifest.n_items, manifest.dim)?;
    let mut seen = vec![false; model.params.len()];
    for entry in &manifest.tensors {
        let fail = |message: String| CheckpointError::Tensor {
            name: entry.name.clone(),
            message,
        };
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| fail("not part of the model".into()))?;
        let t = model.params.tensor(id);
        if t.shape != entry.shape || t.len() != entry.len {
            return Err(fail(format!("shape {:?} does not match model shape {:?}", entry.shape, t.shape)));
        }
        let end = entry
            .len
            .checked_mul(8)
            .and_then(|n| n.checked_add(entry.offset))
            .filter(|&end| entry.offset >= MAGIC.len() && end <= blob.len())
            .ok_or_else(|| fail("byte range outside tensors.bin".into()))?;
        let bytes = &blob[entry.offset..end];
        for (v, chunk) in model.params.values_mut(id).iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = model.params.iter().nth(missing).map(|(_, t)| t.name.clone()).unwrap_or_default();
        return Err(CheckpointError::Tensor {
            name,
            message: "missing from checkpoint".into(),
        });
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> PrpModel {
        let mut m = PrpModel::new(3, 5, 4).unwrap();
        m.init_xavier(&mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let cfg = TrainConfig::default();
        let saved = save(dir.path(), &m, &cfg, 7).unwrap();
        let (loaded, man) = load(dir.path()).unwrap();
        assert_eq!(man, saved);
        assert_eq!(man.epoch, 7);
        assert_eq!(man.config_hash, config_hash(&cfg));
        assert_eq!(man.config_hash.len(), 64);
        let a: Vec<Vec<u64>> = m.params.snapshot().iter().map(|t| t.iter().map(|v| v.to_bits()).collect()).collect();
        let b: Vec<Vec<u64>> = loaded.params.snapshot().iter().map(|t| t.iter().map(|v| v.to_bits()).collect()).collect();
        assert_eq!(a, b);
        let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        assert_eq!(blob.len(), 8 + 8 * m.params.num_params());
    }

    #[test]
    fn config_hash_tracks_config() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            beta: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn tampered_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model(), &TrainConfig::default(), 0).unwrap();
        let p = dir.path().join(BLOB_FILE);
        let mut blob = fs::read(&p).unwrap();
        blob[0] = b'X';
        fs::write(&p, blob).unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::BadMagic { .. })));
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &model(), &TrainConfig::default(), 0).unwrap();
        let p = dir.path().join(BLOB_FILE);
        let blob = fs::read(&p).unwrap();
        fs::write(&p, &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Tensor { .. })));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::Io { .. })));
    }
}
