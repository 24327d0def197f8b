//! Versioned model checkpoints tying weights to their training manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::model::AnnModel;
use crate::ann::train::{LossKind, TrainingConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub loss_kind: LossKind,
    pub c: f64,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub case_name: String,
    pub case_digest: String,
    pub final_loss: f64,
}

impl CheckpointMeta {
    pub fn from_config(
        config: &TrainingConfig,
        case_name: &str,
        case_digest: &str,
        final_loss: f64,
    ) -> Self {
        CheckpointMeta {
            loss_kind: config.loss_kind,
            c: config.c,
            seed: config.seed,
            epochs: config.epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            case_name: case_name.to_string(),
            case_digest: case_digest.to_string(),
            final_loss,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub model: AnnModel,
}

pub fn save_checkpoint(path: &Path, model: &AnnModel, meta: &CheckpointMeta) -> Result<()> {
    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        meta: meta.clone(),
        model: model.clone(),
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &checkpoint)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let checkpoint: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} not supported (expected {})",
            checkpoint.version, CHECKPOINT_VERSION
        )));
    }
    Ok(checkpoint)
}
