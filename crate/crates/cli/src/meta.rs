//! Resolved-config logging and provenance sidecars.

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub fn config_hash(config: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(config).expect("serializable config");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Logs the resolved config verbatim and returns its hash.
pub fn announce(command: &str, config: &impl Serialize) -> String {
    let hash = config_hash(config);
    eprintln!(
        "{command} config {hash}: {}",
        serde_json::to_string(config).expect("serializable config")
    );
    hash
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

/// Writes `<artifact>.meta.json` naming the producing command and config.
pub fn write_sidecar(artifact: &Path, command: &str, hash: &str, config: &impl Serialize) -> Result<()> {
    let p = sidecar_path(artifact);
    let body = serde_json::json!({
        "command": command,
        "config_hash": hash,
        "config": config,
    });
    std::fs::write(&p, serde_json::to_string_pretty(&body)?).with_context(|| format!("writing {}", p.display()))
}
