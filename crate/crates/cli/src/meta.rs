//! `<artifact>.meta.json` sidecars: the producing command, seed, effective
//! configuration and a content hash of the artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ecgqa_core::config::KeyValues;
use ecgqa_core::io_util::{content_hash, read_text, write_atomic};
use ecgqa_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub content_hash: String,
    /// Per-file hashes for multi-file artifacts.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub files: BTreeMap<String, String>,
}

impl ArtifactMeta {
    pub fn new(command: &str, seed: u64, config: &KeyValues, bytes: &[u8]) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config: config
                .keys()
                .map(|k| (k.to_string(), config.raw(k).unwrap_or_default().to_string()))
                .collect(),
            content_hash: content_hash(bytes),
            files: BTreeMap::new(),
        }
    }

    pub fn config_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        for (k, v) in &self.config {
            kv.set(k, v);
        }
        kv
    }
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_meta(path: &Path, meta: &ArtifactMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).expect("metadata serialises") + "\n";
    write_atomic(path, text.as_bytes())
}

/// Write `bytes` to `path` and its sidecar.
pub fn write_artifact(path: &Path, bytes: &[u8], command: &str, seed: u64, config: &KeyValues) -> Result<()> {
    write_atomic(path, bytes)?;
    write_meta(&sidecar_path(path), &ArtifactMeta::new(command, seed, config, bytes))
}

/// Sidecar of `artifact`, or `None` if it has none.
pub fn read_meta(artifact: &Path) -> Result<Option<ArtifactMeta>> {
    let path = sidecar_path(artifact);
    if !path.exists() {
        return Ok(None);
    }
    let text = read_text(&path)?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
