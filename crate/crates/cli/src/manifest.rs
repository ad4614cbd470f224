//! Run manifest: per-stage provenance, file inventory with checksums, and
//! idempotence bookkeeping.
//!
//! The manifest is rewritten atomically (temp file + rename) at each stage
//! completion. A completed stage is never overwritten: rerunning with the
//! same config hash is a no-op, rerunning with a different hash is an error
//! directing the user at a fresh output directory.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(
        "stage '{stage}' already completed with a different config hash \
         ({existing} vs {requested}); outputs are never overwritten - use a fresh output directory"
    )]
    StageConflict {
        stage: String,
        existing: String,
        requested: String,
    },
    #[error("stage '{missing}' must run before '{stage}'")]
    MissingDependency { stage: String, missing: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One output file: path relative to the output directory, checksum, size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// Volatile files (wall-clock tables) are inventoried but excluded from
    /// byte-identity guarantees.
    #[serde(default)]
    pub volatile: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub wall_clock_s: f64,
    pub files: Vec<FileRecord>,
    #[serde(default)]
    pub model_failures: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub root_seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_new(
        output: &Path,
        config_hash: &str,
        root_seed: u64,
    ) -> Result<Self, ManifestError> {
        let path = output.join(MANIFEST_NAME);
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
            Ok(serde_json::from_str(&text)?)
        } else {
            Ok(RunManifest {
                config_hash: config_hash.to_string(),
                root_seed,
                stages: BTreeMap::new(),
            })
        }
    }

    /// Whether `stage` may be skipped (already completed under this config
    /// hash) or must not run (completed under another hash).
    pub fn stage_disposition(
        &self,
        stage: &str,
        config_hash: &str,
    ) -> Result<StageDisposition, ManifestError> {
        match self.stages.get(stage) {
            None => Ok(StageDisposition::Run),
            Some(record) if record.config_hash == config_hash => Ok(StageDisposition::Skip),
            Some(record) => Err(ManifestError::StageConflict {
                stage: stage.to_string(),
                existing: record.config_hash.clone(),
                requested: config_hash.to_string(),
            }),
        }
    }

    pub fn require_stage(&self, stage: &str, for_stage: &str) -> Result<(), ManifestError> {
        if self.stages.contains_key(stage) {
            Ok(())
        } else {
            Err(ManifestError::MissingDependency {
                stage: for_stage.to_string(),
                missing: stage.to_string(),
            })
        }
    }

    pub fn record_stage(&mut self, name: &str, record: StageRecord) {
        self.stages.insert(name.to_string(), record);
    }

    /// Atomic write: serialize to a temp file in the same directory, then
    /// rename over the target.
    pub fn write(&self, output: &Path) -> Result<(), ManifestError> {
        std::fs::create_dir_all(output).map_err(io_err(output))?;
        let path = output.join(MANIFEST_NAME);
        let tmp = output.join(format!(".{MANIFEST_NAME}.tmp"));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(())
    }

    /// All inventoried files, relative paths.
    pub fn all_files(&self) -> Vec<&FileRecord> {
        self.stages.values().flat_map(|s| s.files.iter()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageDisposition {
    Run,
    Skip,
}

/// SHA-256 of a file on disk.
pub fn checksum_file(path: &Path) -> Result<FileRecord, ManifestError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(FileRecord {
        path: String::new(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
        volatile: false,
    })
}

/// Checksum a batch of stage outputs relative to the output root.
pub fn checksum_outputs(
    output: &Path,
    relative_paths: &[(String, bool)],
) -> Result<Vec<FileRecord>, ManifestError> {
    let mut records = Vec::with_capacity(relative_paths.len());
    for (rel, volatile) in relative_paths {
        let mut record = checksum_file(&output.join(rel))?;
        record.path = rel.clone();
        record.volatile = *volatile;
        records.push(record);
    }
    Ok(records)
}

pub fn now_unix_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .expect("clock after epoch")
        .as_millis()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_dispositions() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = RunManifest::load_or_new(dir.path(), "abc", 7).unwrap();
        assert_eq!(
            manifest.stage_disposition("naive", "abc").unwrap(),
            StageDisposition::Run
        );
        manifest.record_stage(
            "naive",
            StageRecord {
                config_hash: "abc".into(),
                seed: 1,
                started_unix_ms: 0,
                finished_unix_ms: 1,
                wall_clock_s: 0.001,
                files: vec![],
                model_failures: 0,
            },
        );
        manifest.write(dir.path()).unwrap();

        let loaded = RunManifest::load_or_new(dir.path(), "abc", 7).unwrap();
        assert_eq!(
            loaded.stage_disposition("naive", "abc").unwrap(),
            StageDisposition::Skip
        );
        assert!(matches!(
            loaded.stage_disposition("naive", "other"),
            Err(ManifestError::StageConflict { .. })
        ));
        assert!(loaded.require_stage("naive", "errors").is_ok());
        assert!(loaded.require_stage("bae", "report").is_err());
    }

    #[test]
    fn checksums_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("x.csv");
        std::fs::write(&file, "a,b\n1,2\n").unwrap();
        let a = checksum_file(&file).unwrap();
        let b = checksum_file(&file).unwrap();
        assert_eq!(a.sha256, b.sha256);
        assert_eq!(a.bytes, 8);
    }
}
