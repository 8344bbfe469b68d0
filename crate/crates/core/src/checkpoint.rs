//! Trained prompts on disk.
//!
//! A checkpoint is one JSON document carrying the parameters as exact
//! `f64` values together with the encoder and training configuration that
//! produced them. Loading against a different encoder configuration is
//! refused with both configuration hashes in the error.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::PromptTemplate;
use crate::encoder::{EncoderConfig, PromptParameters};
use crate::error::{Result, SapError};
use crate::trainer::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub encoder_config: EncoderConfig,
    pub train_config: TrainConfig,
    pub template: PromptTemplate,
    pub params: PromptParameters,
}

impl Checkpoint {
    pub fn new(
        params: PromptParameters,
        encoder_config: EncoderConfig,
        train_config: TrainConfig,
        template: PromptTemplate,
    ) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config_hash: encoder_config.config_hash(),
            encoder_config,
            train_config,
            template,
            params,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    /// Parses a checkpoint and, when `expected` is given, checks that it was
    /// trained against that encoder configuration.
    pub fn from_json_str(text: &str, expected: Option<&EncoderConfig>) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| SapError::json("checkpoint", e))?;
        let found = value.get("format_version").and_then(serde_json::Value::as_u64);
        if found != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(SapError::CheckpointVersion {
                found: found.map_or_else(|| "missing".to_string(), |v| v.to_string()),
                expected: CHECKPOINT_VERSION,
            });
        }
        let checkpoint: Checkpoint = serde_json::from_value(value).map_err(|e| SapError::json("checkpoint", e))?;
        let recomputed = checkpoint.encoder_config.config_hash();
        if recomputed != checkpoint.config_hash {
            return Err(SapError::ConfigHashMismatch {
                stored: checkpoint.config_hash,
                provided: recomputed,
            });
        }
        if let Some(expected) = expected {
            let provided = expected.config_hash();
            if provided != checkpoint.config_hash {
                return Err(SapError::ConfigHashMismatch {
                    stored: checkpoint.config_hash,
                    provided,
                });
            }
        }
        checkpoint
            .params
            .check_against(&checkpoint.encoder_config, checkpoint.encoder_config.d_prime)?;
        Ok(checkpoint)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint.to_json()).map_err(|e| SapError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&EncoderConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SapError::io(path, e))?;
    Checkpoint::from_json_str(&text, expected)
}

/// SHA-256 of the file contents, hex encoded.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| SapError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
