//! Artifact hashing and the provenance chain.
//!
//! Every JSON artifact embeds an `inputs` map from a short label to the
//! sha256 of the file it consumed, so any stage's output can be traced back
//! to exact input bytes. CSV artifacts get a `<name>.meta.json` sidecar with
//! the same map.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, DmoeError, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(sha256_bytes(&bytes))
}

/// Builds an `inputs` provenance map from labeled paths, failing early if a
/// named input is missing.
pub fn hash_inputs(labeled: &[(&str, &Path)]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (label, path) in labeled {
        if !path.exists() {
            return Err(DmoeError::MissingInput(path.to_path_buf()));
        }
        out.insert(label.to_string(), sha256_file(path)?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DmoeError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(DmoeError::MissingInput(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DmoeError::Json {
        path: path.to_path_buf(),
        source,
    })
}
