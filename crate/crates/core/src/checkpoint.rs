//! JSON checkpoints and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PidError, Result};
use crate::optim::OptimizerState;
use crate::student::{StudentConfig, StudentParams};

pub const CHECKPOINT_VERSION: u64 = 1;

/// Everything needed to resume training bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u64,
    pub config: StudentConfig,
    pub params: StudentParams,
    pub ema_params: StudentParams,
    pub step: usize,
    pub rng_state: ChaCha8Rng,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.params.check_compatible(&self.config)?;
        self.ema_params.check_compatible(&self.config)?;
        if self.optimizer.m.len() != self.params.len() || self.optimizer.v.len() != self.params.len() {
            return Err(PidError::Input("optimizer state does not match parameter count".into()));
        }
        Ok(())
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| PidError::Input(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(ckpt).map_err(|e| PidError::Parse(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| PidError::Parse(format!("checkpoint: {e}")))?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| PidError::Parse("checkpoint: missing integer `version`".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(PidError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let ckpt: Checkpoint =
        serde_json::from_value(value).map_err(|e| PidError::Parse(format!("checkpoint: {e}")))?;
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}
