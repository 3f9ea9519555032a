use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hash::sha256_file;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path, shown_as: String) -> std::io::Result<Self> {
        Ok(FileHash {
            path: shown_as,
            sha256: sha256_file(path)?,
        })
    }
}

/// What a stage consumed and produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub tool_version: String,
    pub input_hashes: Vec<FileHash>,
    pub output_paths: Vec<FileHash>,
    pub started: String,
    pub finished: String,
    /// Set when a rerun found matching outputs and did nothing.
    #[serde(default)]
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_checked: Option<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)
    }
}
