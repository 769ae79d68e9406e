//! Versioned, checksummed training checkpoints.
//!
//! Layout: a `cddrec-ckpt v1` line, a `sha256 <hex>` line over the body,
//! then the JSON body. Floats round-trip exactly, so a resumed run
//! continues bit for bit.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::TrainState;

pub const MAGIC: &str = "cddrec-ckpt v1";

fn hex_digest(body: &str) -> String {
    Sha256::digest(body.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_string(state: &TrainState) -> Result<String> {
    let body = serde_json::to_string(state).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(format!("{MAGIC}\nsha256 {}\n{body}", hex_digest(&body)))
}

pub fn from_str(text: &str) -> Result<TrainState> {
    let mut parts = text.splitn(3, '\n');
    let magic = parts.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("unsupported checkpoint header {magic:?}")));
    }
    let sum = parts
        .next()
        .and_then(|l| l.strip_prefix("sha256 "))
        .ok_or_else(|| Error::Checkpoint("missing checksum line".into()))?;
    let body = parts.next().ok_or_else(|| Error::Checkpoint("missing body".into()))?;
    if hex_digest(body) != sum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    serde_json::from_str(body).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_string(state)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// The model to evaluate: the best parameters seen if any, else the latest.
pub fn load_model(path: &Path) -> Result<(Model, TrainState)> {
    let state = load(path)?;
    let params = state.best_params.clone().unwrap_or_else(|| state.params.clone());
    Ok((Model::from_params(state.model_config, params)?, state))
}
