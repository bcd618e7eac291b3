//! Run configuration: one JSON document with `model`, `training`, `metrics`
//! and `paths` sections.

use std::fs;
use std::path::{Path, PathBuf};

use dynlab_core::model::ModelConfig;
use dynlab_core::store::AnalysisSettings;
use dynlab_core::trainer::{TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "DYNLAB_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    /// Defaults to `model_dim / num_heads`.
    #[serde(default)]
    pub head_dim: Option<usize>,
    /// Defaults to `4 * model_dim`.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    /// Byte-level tokens need 256.
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub context_len: usize,
}

fn default_vocab() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    /// Text file, tokenized byte by byte.
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Label used in reports. Defaults to the output directory name.
    #[serde(default)]
    pub model_id: Option<String>,
    pub model: ModelSection,
    pub training: TrainConfig,
    #[serde(default)]
    pub metrics: AnalysisSettings,
    pub paths: PathsSection,
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("{name}: {msg}"))
}

impl RunConfig {
    pub fn parse(json: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(json).map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies `seed_override` and validates. Relative paths are
    /// resolved against the directory holding the config file.
    pub fn load(path: &Path, seed_override: Option<&str>) -> Result<Self> {
        let json = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&json)?;
        if let Some(raw) = seed_override {
            cfg.training.seed = raw
                .trim()
                .parse()
                .map_err(|_| field(SEED_ENV, format!("expected an unsigned integer, got {raw:?}")))?;
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.corpus, &mut cfg.paths.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let head_dim = match m.head_dim {
            Some(h) => h,
            None if m.num_heads > 0 && m.model_dim % m.num_heads == 0 => m.model_dim / m.num_heads,
            None => {
                return Err(field(
                    "model.num_heads",
                    format!("must divide model.model_dim ({})", m.model_dim),
                ))
            }
        };
        let cfg = ModelConfig {
            num_layers: m.num_layers,
            model_dim: m.model_dim,
            num_heads: m.num_heads,
            head_dim,
            mlp_hidden: m.mlp_hidden.unwrap_or(4 * m.model_dim),
            vocab_size: m.vocab_size,
            context_len: m.context_len,
        };
        cfg.validate().map_err(|e| field("model", e))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        if self.model.context_len < 2 {
            return Err(field("model.context_len", "must be at least 2"));
        }
        self.training.validate().map_err(|e| match e {
            TrainError::Config(m) => CliError::usage(format!("training.{m}")),
            other => field("training", other),
        })?;
        let t = &self.metrics.thresholds;
        let checks = [
            ("metrics.thresholds.cka", t.cka, true),
            ("metrics.thresholds.horizon_fraction", t.horizon_fraction, false),
            ("metrics.thresholds.param_per", t.param_per, false),
            ("metrics.thresholds.grad_per_fraction", t.grad_per_fraction, false),
        ];
        for (name, v, zero_ok) in checks {
            let lower_ok = if zero_ok { v >= 0.0 } else { v > 0.0 };
            if !(lower_ok && v <= 1.0) {
                let range = if zero_ok { "[0, 1]" } else { "(0, 1]" };
                return Err(field(name, format!("must lie in {range}, got {v}")));
            }
        }
        if self.paths.corpus.as_os_str().is_empty() {
            return Err(field("paths.corpus", "must not be empty"));
        }
        if self.paths.output_dir.as_os_str().is_empty() {
            return Err(field("paths.output_dir", "must not be empty"));
        }
        if matches!(&self.model_id, Some(id) if id.trim().is_empty()) {
            return Err(field("model_id", "must not be blank"));
        }
        Ok(())
    }

    pub fn resolved_model_id(&self) -> String {
        self.model_id.clone().unwrap_or_else(|| {
            self.paths
                .output_dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into())
        })
    }
}
