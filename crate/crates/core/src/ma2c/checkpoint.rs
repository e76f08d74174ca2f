//! Binary checkpoints of a training run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Trainer;

const MAGIC: &str = "greenpath-ma2c";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Decode(#[from] bincode::Error),
    #[error("not a checkpoint file")]
    Magic,
    #[error("checkpoint version {0} is not supported (expected {CHECKPOINT_VERSION})")]
    Version(u32),
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    magic: String,
    version: u32,
    trainer: Trainer,
}

pub fn to_bytes(trainer: &Trainer) -> Result<Vec<u8>, CheckpointError> {
    let env = Envelope {
        magic: MAGIC.into(),
        version: CHECKPOINT_VERSION,
        trainer: trainer.clone(),
    };
    Ok(bincode::serialize(&env)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Trainer, CheckpointError> {
    let env: Envelope = bincode::deserialize(bytes)?;
    if env.magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    if env.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(env.version));
    }
    Ok(env.trainer)
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<(), CheckpointError> {
    let bytes = to_bytes(trainer)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Trainer, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
