use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fnv1a64_hex, io_err, Result, StoreError};
use crate::analysis::Thresholds;
use crate::metrics::PerDenominator;
use crate::model::{ModelConfig, WriteKind};
use crate::trainer::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_DIGEST_FILE: &str = "manifest.fnv1a64";

/// A file inside the run directory with its content digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    /// FNV-1a 64 of the whole file, 16 hex digits.
    pub fnv1a64: String,
    pub bytes: u64,
}

impl FileEntry {
    pub(crate) fn of(path: String, contents: &[u8]) -> Self {
        Self {
            path,
            fnv1a64: fnv1a64_hex(contents),
            bytes: contents.len() as u64,
        }
    }

    /// Reads the file and checks its digest.
    pub fn read_verified(&self, run_dir: &Path) -> Result<Vec<u8>> {
        let path = run_dir.join(&self.path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = fnv1a64_hex(&bytes);
        if actual != self.fnv1a64 {
            return Err(StoreError::Integrity {
                path,
                expected: self.fnv1a64.clone(),
                actual,
            });
        }
        Ok(bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    pub eval_loss: f64,
    pub params: FileEntry,
    pub optimizer: FileEntry,
    pub write_grads: FileEntry,
}

impl CheckpointEntry {
    pub fn files(&self) -> [&FileEntry; 3] {
        [&self.params, &self.optimizer, &self.write_grads]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub step: u64,
    pub layer: usize,
    pub kind: WriteKind,
    /// `[rows x D]`, rows = eval batch size times sequence length.
    pub rows: usize,
    pub file: FileEntry,
}

/// Settings that analysis of this run should use unless overridden.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AnalysisSettings {
    #[serde(default)]
    pub per_denominator: PerDenominator,
    #[serde(default)]
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u16,
    pub tool_version: String,
    pub model_id: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub schedule: Vec<u64>,
    pub corpus_digest: String,
    pub corpus_tokens: u64,
    #[serde(default)]
    pub analysis: AnalysisSettings,
    pub eval_batch: FileEntry,
    pub checkpoints: Vec<CheckpointEntry>,
    pub activations: Vec<ActivationEntry>,
    /// False while training is still writing; readers that need a complete
    /// run must check this.
    pub finalized: bool,
}

impl RunManifest {
    pub fn checkpoint(&self, step: u64) -> Option<&CheckpointEntry> {
        self.checkpoints.iter().find(|c| c.step == step)
    }

    pub fn activation(&self, step: u64, layer: usize, kind: WriteKind) -> Option<&ActivationEntry> {
        self.activations
            .iter()
            .find(|a| a.step == step && a.layer == layer && a.kind == kind)
    }

    /// Every file the manifest vouches for.
    pub fn files(&self) -> impl Iterator<Item = &FileEntry> {
        std::iter::once(&self.eval_batch)
            .chain(self.checkpoints.iter().flat_map(|c| c.files()))
            .chain(self.activations.iter().map(|a| &a.file))
    }

    pub(crate) fn write(&self, run_dir: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self).map_err(|source| StoreError::Manifest {
            path: run_dir.join(MANIFEST_FILE),
            source,
        })?;
        json.push(b'\n');
        // Write to temporaries first so a crash never leaves a torn manifest.
        let tmp = run_dir.join(".manifest.json.tmp");
        fs::write(&tmp, &json).map_err(io_err(&tmp))?;
        let tmp_digest = run_dir.join(".manifest.fnv1a64.tmp");
        fs::write(&tmp_digest, format!("{}\n", fnv1a64_hex(&json))).map_err(io_err(&tmp_digest))?;
        let dest = run_dir.join(MANIFEST_FILE);
        fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
        let dest_digest = run_dir.join(MANIFEST_DIGEST_FILE);
        fs::rename(&tmp_digest, &dest_digest).map_err(io_err(&dest_digest))?;
        Ok(())
    }

    /// Reads and digest-checks the manifest of `run_dir`.
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let json = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound(format!(
                    "no {MANIFEST_FILE} in {}",
                    run_dir.display()
                )))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let digest_path = run_dir.join(MANIFEST_DIGEST_FILE);
        let recorded = fs::read(&digest_path).map_err(io_err(&digest_path))?;
        let expected = String::from_utf8_lossy(&recorded).trim_end_matches('\n').to_string();
        let actual = fnv1a64_hex(&json);
        if expected != actual {
            return Err(StoreError::Integrity {
                path,
                expected,
                actual,
            });
        }
        serde_json::from_slice(&json).map_err(|source| StoreError::Manifest { path, source })
    }
}
