use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON envelope. Floats use shortest round-trip formatting, so a
/// save/load cycle reproduces every parameter bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub version: u32,
    pub kind: String,
    pub payload: T,
}

pub fn save_checkpoint<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        payload,
    };
    let bytes = serde_json::to_vec(&ck)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint<T> = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported checkpoint version {}", ck.version),
        });
    }
    if ck.kind != kind {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected a `{kind}` checkpoint, found `{}`", ck.kind),
        });
    }
    Ok(ck.payload)
}
