//! Checkpoint files: one JSON header line followed by one JSON payload line.
//! The header names the format version and carries the payload's length and
//! SHA-256 digest; floats are written in shortest round-trip decimal form.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::modes::ModeConfig;
use crate::sim::SimState;

pub const FORMAT: &str = "gba-lab-checkpoint";
pub const VERSION: u32 = 1;
pub const ENCODING: &str = "json-f64-roundtrip";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub encoding: String,
    pub sha256: String,
    pub length: usize,
}

/// Everything needed to continue a run: the full simulator state (server
/// parameters, data and token cursors, in-flight events) plus the mode,
/// run seed and data day it belongs to. Random draws are keyed by the run
/// seed and counters inside the state, so no generator state is stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub mode: ModeConfig,
    pub seed: u64,
    pub day: usize,
    pub eta: f64,
    pub state: SimState,
}

impl Checkpoint {
    pub fn global_step(&self) -> u64 {
        self.state.ps.global_step()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = serde_json::to_string(self)?;
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            encoding: ENCODING.into(),
            sha256: hex::encode(Sha256::digest(payload.as_bytes())),
            length: payload.len(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend_from_slice(payload.as_bytes());
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::Checkpoint("not UTF-8".into()))?;
        let (head, rest) = text
            .split_once('\n')
            .ok_or_else(|| Error::Checkpoint("truncated: missing payload".into()))?;
        let header: Header =
            serde_json::from_str(head).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "version {} is not supported (expected {VERSION})",
                header.version
            )));
        }
        if header.encoding != ENCODING {
            return Err(Error::Checkpoint(format!("unknown encoding {:?}", header.encoding)));
        }
        let payload = rest.strip_suffix('\n').unwrap_or(rest);
        if payload.len() != header.length {
            return Err(Error::Checkpoint(format!(
                "corrupt or truncated: payload is {} bytes, header says {}",
                payload.len(),
                header.length
            )));
        }
        if hex::encode(Sha256::digest(payload.as_bytes())) != header.sha256 {
            return Err(Error::Checkpoint("corrupt: checksum mismatch".into()));
        }
        serde_json::from_str(payload).map_err(|e| Error::Checkpoint(format!("bad payload: {e}")))
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
