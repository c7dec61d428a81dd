//! Per-directory manifests: tool version, config hash, file hashes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    /// Relative path to SHA-256 of every file below the directory.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), CliError> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("below root");
        if rel == Path::new(MANIFEST) {
            continue;
        }
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        out.insert(key, sha256_hex(&std::fs::read(&path)?));
    }
    Ok(())
}

/// Writes `dir/manifest.json` over the current contents of `dir`.
pub fn write_manifest(dir: &Path, command: &str, config_json: &str) -> Result<Manifest, CliError> {
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files)?;
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_sha256: sha256_hex(config_json.as_bytes()),
        files,
    };
    let mut text = serde_json::to_string_pretty(&m).map_err(reserve_core::Error::from)?;
    text.push('\n');
    std::fs::write(dir.join(MANIFEST), text)?;
    Ok(m)
}
