//! Small shared helpers for file output.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_file(path: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_toml<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::format("toml", e.to_string()))?;
    write_file(path, text)
}

pub fn read_toml<D: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<D> {
    let path = path.as_ref();
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| Error::format("toml", format!("{}: {e}", path.display())))
}

/// Shortest round-trippable decimal form, used for every numeric text output.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}
