//! SHA-256 manifest of everything written under an output directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{CliError, CliResult};
use crate::io::{read_bytes, write_json};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Relative path (forward slashes) to hex digest.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    /// Hashes every regular file under `root` except the manifest itself.
    pub fn scan(root: &Path) -> CliResult<Self> {
        let mut artifacts = BTreeMap::new();
        for entry in WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| {
                let path = e.path().unwrap_or(root).to_path_buf();
                CliError::io(path, e.into())
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry.path().strip_prefix(root).expect("walk stays under root");
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if key == MANIFEST_NAME {
                continue;
            }
            artifacts.insert(key, sha256_hex(&read_bytes(entry.path())?));
        }
        Ok(Self { artifacts })
    }

    /// Rescans `root` and rewrites its manifest.
    pub fn refresh(root: &Path) -> CliResult<Self> {
        let m = Self::scan(root)?;
        write_json(&root.join(MANIFEST_NAME), &m)?;
        Ok(m)
    }
}
