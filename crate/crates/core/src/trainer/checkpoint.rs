use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::trainer::optim::AdamState;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub step: u64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
    pub wall_time_sec: f64,
    #[serde(default)]
    pub valid_metrics: BTreeMap<String, f64>,
}

impl EpochRecord {
    /// Equality ignoring `wall_time_sec`.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        Self {
            wall_time_sec: 0.0,
            ..self.clone()
        } == Self {
            wall_time_sec: 0.0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: u32,
    pub global_step: u64,
    pub params: Params,
    pub optimizer_state: AdamState,
    pub rng_state: Pcg64,
    /// `None` until the first validation.
    pub best_valid_metric: Option<f64>,
    pub best_epoch: u32,
    pub epochs_since_improvement: u32,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
    pub config_hash: String,
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_vec(ckpt).map_err(|e| Error::SchemaError(e.to_string()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&json).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let params: Vec<_> = ckpt.params.keys().collect();
    let m: Vec<_> = ckpt.optimizer_state.m.keys().collect();
    let v: Vec<_> = ckpt.optimizer_state.v.keys().collect();
    if params != m || params != v {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: "optimizer moments do not cover the parameter set".into(),
        });
    }
    Ok(ckpt)
}

/// Loads a checkpoint written under the same trajectory-shaping config.
pub fn load_compatible(path: impl AsRef<Path>, config_hash: &str) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config_hash != config_hash {
        return Err(Error::IncompatibleCheckpoint {
            expected: config_hash.to_string(),
            found: ckpt.config_hash,
        });
    }
    Ok(ckpt)
}
