//! Registry of completed stages and their artifacts, stored as one JSON file
//! in the workspace and rewritten atomically on every change.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest {path} is malformed: {message}")]
    Malformed { path: String, message: String },
    #[error("manifest lists stage {0} twice")]
    DuplicateStage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage_name: String,
    pub input_digest: String,
    /// Paths relative to the workspace directory, sorted.
    pub output_paths: Vec<PathBuf>,
    /// RFC 3339 UTC timestamp.
    pub completed_at: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceManifest {
    pub stage_records: Vec<StageRecord>,
}

impl WorkspaceManifest {
    /// An absent file reads as an empty manifest.
    pub fn load(workspace: &Path) -> Result<Self, ManifestError> {
        let path = workspace.join(MANIFEST_FILE);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(source) => {
                return Err(ManifestError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let m: Self = serde_json::from_slice(&bytes).map_err(|e| ManifestError::Malformed {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut names = std::collections::HashSet::new();
        for r in &m.stage_records {
            if !names.insert(r.stage_name.as_str()) {
                return Err(ManifestError::DuplicateStage(r.stage_name.clone()));
            }
        }
        Ok(m)
    }

    pub fn save(&self, workspace: &Path) -> Result<(), ManifestError> {
        let path = workspace.join(MANIFEST_FILE);
        let io = |source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(workspace).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(workspace).map_err(io)?;
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        tmp.write_all(&json).map_err(io)?;
        tmp.write_all(b"\n").map_err(io)?;
        tmp.persist(&path).map_err(|e| io(e.error))?;
        Ok(())
    }

    pub fn get(&self, stage: &str) -> Option<&StageRecord> {
        self.stage_records.iter().find(|r| r.stage_name == stage)
    }

    /// Complete means recorded with every output still on disk.
    pub fn is_complete(&self, stage: &str, workspace: &Path) -> bool {
        self.get(stage)
            .is_some_and(|r| r.output_paths.iter().all(|p| workspace.join(p).exists()))
    }

    pub fn remove(&mut self, stage: &str) {
        self.stage_records.retain(|r| r.stage_name != stage);
    }

    /// Inserts or replaces the record for `record.stage_name`.
    pub fn upsert(&mut self, record: StageRecord) {
        match self
            .stage_records
            .iter_mut()
            .find(|r| r.stage_name == record.stage_name)
        {
            Some(slot) => *slot = record,
            None => self.stage_records.push(record),
        }
    }
}

/// Incremental SHA-256 over labelled parts; used for stage input digests.
#[derive(Default)]
pub struct DigestBuilder {
    hasher: Sha256,
}

impl DigestBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn part(&mut self, label: &str, bytes: &[u8]) -> &mut Self {
        self.hasher.update((label.len() as u64).to_le_bytes());
        self.hasher.update(label.as_bytes());
        self.hasher.update((bytes.len() as u64).to_le_bytes());
        self.hasher.update(bytes);
        self
    }

    pub fn json<T: Serialize>(&mut self, label: &str, value: &T) -> &mut Self {
        let bytes = serde_json::to_vec(value).expect("digest input serializes");
        self.part(label, &bytes)
    }

    pub fn file(&mut self, label: &str, path: &Path) -> std::io::Result<&mut Self> {
        let bytes = std::fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        Ok(self.part(label, &digest))
    }

    pub fn finish(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(name: &str, outputs: &[&str]) -> StageRecord {
        StageRecord {
            stage_name: name.into(),
            input_digest: "d".into(),
            output_paths: outputs.iter().map(PathBuf::from).collect(),
            completed_at: "2024-01-01T00:00:00Z".into(),
            tool_version: "0".into(),
        }
    }

    #[test]
    fn round_trip_and_completeness() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(
            WorkspaceManifest::load(dir.path()).unwrap(),
            WorkspaceManifest::default()
        );
        let mut m = WorkspaceManifest::default();
        m.upsert(record("ingest", &["ingest/a.wav"]));
        m.upsert(record("ivr", &[]));
        m.upsert(record("ingest", &["ingest/b.wav"]));
        assert_eq!(m.stage_records.len(), 2);
        m.save(dir.path()).unwrap();
        let back = WorkspaceManifest::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert!(!back.is_complete("ingest", dir.path()));
        std::fs::create_dir_all(dir.path().join("ingest")).unwrap();
        std::fs::write(dir.path().join("ingest/b.wav"), b"x").unwrap();
        assert!(back.is_complete("ingest", dir.path()));
        assert!(back.is_complete("ivr", dir.path()));
        assert!(!back.is_complete("asr", dir.path()));
    }

    #[test]
    fn duplicate_stage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = WorkspaceManifest {
            stage_records: vec![record("x", &[]), record("x", &[])],
        };
        m.save(dir.path()).unwrap();
        assert!(matches!(
            WorkspaceManifest::load(dir.path()),
            Err(ManifestError::DuplicateStage(_))
        ));
    }

    #[test]
    fn digest_is_framed() {
        let a = DigestBuilder::new().part("a", b"bc").finish();
        let b = DigestBuilder::new().part("ab", b"c").finish();
        assert_ne!(a, b);
        assert_eq!(a, DigestBuilder::new().part("a", b"bc").finish());
    }
}
