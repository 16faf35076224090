//! Stage checkpoints: an 8-byte magic, a little-endian u32 format version,
//! then the bincode-encoded [`Checkpoint`]. Floats and RNG state are stored
//! exactly, so a loaded checkpoint resumes bitwise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::pipeline::Stage;
use crate::scene::PoseSequence;
use crate::surfel::SurfelCloud;
use crate::train::Trainer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SOARCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    pub seed: u64,
    pub sequence: PoseSequence,
    pub cloud: Option<SurfelCloud>,
    /// Optimizer moments and RNG streams after the stage's last step.
    pub trainer: Option<Trainer>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bincode::serialize_into(&mut out, self).map_err(|e| Error::InvalidArgument(format!("checkpoint encoding: {e}")))?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(format!("checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"));
        }
        bincode::deserialize(&bytes[12..]).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Checkpoint::decode(&bytes).map_err(|m| Error::format(path, m))?;
        if let Some(cloud) = &ckpt.cloud {
            cloud.validate().map_err(|e| Error::format(path, e.to_string()))?;
        }
        Ok(ckpt)
    }

    pub fn cloud(&self) -> Result<&SurfelCloud> {
        self.cloud.as_ref().ok_or_else(|| Error::InvalidArgument(format!("{} checkpoint carries no surfel cloud", self.stage)))
    }
}
