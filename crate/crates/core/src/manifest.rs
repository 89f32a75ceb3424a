//! Run manifests: what a command read, wrote and was configured with.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: serde_json::Value,
    /// Fully resolved settings.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    /// Relative to the output directory.
    pub outputs: Vec<FileHash>,
    pub version: String,
    pub wall_ms: u128,
}

impl RunManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Output hashes keyed by relative path.
    pub fn output_digest(&self) -> BTreeMap<&str, &str> {
        self.outputs
            .iter()
            .map(|f| (f.path.as_str(), f.sha256.as_str()))
            .collect()
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: hash_bytes(&bytes),
        bytes: bytes.len() as u64,
    })
}

/// Every file under `path` (or `path` itself), sorted, with paths relative
/// to `path` when it is a directory.
pub fn hash_tree(path: &Path) -> Result<Vec<FileHash>> {
    if path.is_file() {
        return Ok(vec![hash_file(path)?]);
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Data(format!("walking {}: {e}", path.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(path).expect("walk stays under root");
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        let mut h = hash_file(entry.path())?;
        h.path = rel.display().to_string();
        out.push(h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_hash_skips_the_manifest_and_is_relative() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/a.txt"), b"abc").unwrap();
        std::fs::write(dir.path().join("b.txt"), b"").unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), b"{}").unwrap();
        let h = hash_tree(dir.path()).unwrap();
        let names: Vec<&str> = h.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(names, ["b.txt", "sub/a.txt"]);
        assert_eq!(
            h[1].sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest {
            command: "render".into(),
            args: serde_json::json!({"features": "x.xdmf"}),
            config: serde_json::json!({}),
            seeds: BTreeMap::from([("global".to_string(), 3)]),
            inputs: vec![],
            outputs: vec![],
            version: "0.1.0".into(),
            wall_ms: 12,
        };
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
    }
}
