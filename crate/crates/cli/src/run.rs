use std::collections::BTreeMap;

use sentifuse::textnorm::NormPolicy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub training: u64,
    pub split: u64,
    pub folds: u64,
}

/// Provenance of one command invocation. The embedded configuration and its
/// hash are enough to rerun the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub run_id: String,
    pub config_path: String,
    pub config_sha256: String,
    pub config: String,
    pub seeds: Seeds,
    pub backend_versions: BTreeMap<String, String>,
    pub normalization: NormPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<String>,
    /// Files written, relative to the output root.
    pub outputs: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    /// File name of the manifest written by `command`.
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }
}
