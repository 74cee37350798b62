//! Run manifests: a JSON record of which files a run produced, each with
//! its SHA-256, so downstream commands can detect corruption and enforce
//! stage ordering.

use crate::checkpoint::file_sha256;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    /// Seconds since the Unix epoch at registration (informational only;
    /// numerics never read the clock).
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub stages: BTreeMap<String, StageEntry>,
    pub status: String,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        RunManifest {
            config_hash: config_hash.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            stages: BTreeMap::new(),
            status: "in_progress".to_string(),
        }
    }

    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        let path = Self::manifest_path(dir);
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("manifest {}: {e}", path.display())))
    }

    pub fn load_or_new(dir: &Path, config_hash: &str) -> RunManifest {
        Self::load(dir).unwrap_or_else(|_| RunManifest::new(config_hash))
    }

    /// Hashes the file and records it under the stage name.
    pub fn register(&mut self, dir: &Path, stage: &str, file_name: &str) -> Result<()> {
        let sha256 = file_sha256(&dir.join(file_name))?;
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.stages.insert(stage.to_string(), StageEntry {
            path: file_name.to_string(),
            sha256,
            timestamp,
        });
        Ok(())
    }

    /// Confirms every registered file exists and matches its hash, then
    /// marks the manifest completed and writes it.
    pub fn finalize(&mut self, dir: &Path) -> Result<()> {
        self.verify_all(dir)?;
        self.status = "completed".to_string();
        self.save(dir)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)?;
        crate::cli::write_atomic(&Self::manifest_path(dir), &json)
    }

    /// Verifies one stage's file against its recorded hash.
    pub fn verify(&self, dir: &Path, stage: &str) -> Result<PathBuf> {
        let entry = self.stages.get(stage).ok_or_else(|| {
            Error::Validation(format!("manifest has no stage {stage:?}"))
        })?;
        let path = dir.join(&entry.path);
        let actual = file_sha256(&path)?;
        if actual != entry.sha256 {
            return Err(Error::HashMismatch {
                path: path.display().to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        Ok(path)
    }

    pub fn verify_all(&self, dir: &Path) -> Result<()> {
        for stage in self.stages.keys() {
            self.verify(dir, stage)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Seek, SeekFrom, Write};

    #[test]
    fn register_verify_finalize_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("data.csv"), b"a,b\n1,2\n").unwrap();
        let mut m = RunManifest::new("cfg");
        m.register(dir.path(), "data", "data.csv").unwrap();
        m.finalize(dir.path()).unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.status, "completed");
        loaded.verify(dir.path(), "data").unwrap();
    }

    #[test]
    fn single_bit_flip_detected() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("blob.bin");
        std::fs::write(&file, vec![0u8; 256]).unwrap();
        let mut m = RunManifest::new("cfg");
        m.register(dir.path(), "blob", "blob.bin").unwrap();
        // Flip one bit in the middle of the file.
        let mut f = std::fs::OpenOptions::new().read(true).write(true).open(&file).unwrap();
        f.seek(SeekFrom::Start(100)).unwrap();
        let mut byte = [0u8; 1];
        f.read_exact(&mut byte).unwrap();
        byte[0] ^= 0b0000_0100;
        f.seek(SeekFrom::Start(100)).unwrap();
        f.write_all(&byte).unwrap();
        drop(f);
        let err = m.verify(dir.path(), "blob").unwrap_err();
        assert!(matches!(err, Error::HashMismatch { .. }));
    }

    #[test]
    fn missing_stage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new("cfg");
        assert!(m.verify(dir.path(), "nope").is_err());
    }
}
