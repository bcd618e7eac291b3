use std::fs;
use std::path::{Path, PathBuf};

use dynlab_core::data::{check_vocab, encode_bytes, DataError};
use dynlab_core::store::{self, corpus_digest, RunHeader, RunWriter, MANIFEST_FILE};
use dynlab_core::trainer::{TrainError, Trainer};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Value of the seed override variable, if set.
    pub seed_override: Option<String>,
    /// Replace an existing run in the output directory.
    pub force: bool,
    pub quiet: bool,
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::usage(format!("training.{m}")),
        TrainError::Data(e @ DataError::CorpusTooShort { .. }) => {
            CliError::usage(format!("paths.corpus: {e}"))
        }
        TrainError::Data(e @ DataError::TokenOutOfRange { .. }) => {
            CliError::usage(format!("model.vocab_size: {e}"))
        }
        other => CliError::runtime(other.to_string()),
    }
}

/// Trains the configured model and writes a finalized run directory, which
/// is returned.
pub fn cmd_train(config_path: &Path, opts: &TrainOptions) -> Result<PathBuf> {
    let cfg = RunConfig::load(config_path, opts.seed_override.as_deref())?;
    let model_cfg = cfg.model_config()?;
    let corpus_path = &cfg.paths.corpus;
    let text = fs::read(corpus_path).map_err(|e| {
        CliError::usage(format!("paths.corpus: cannot read {}: {e}", corpus_path.display()))
    })?;
    if text.is_empty() {
        return Err(CliError::usage(format!(
            "paths.corpus: {} is empty",
            corpus_path.display()
        )));
    }
    let tokens = encode_bytes(&text);
    check_vocab(&tokens, model_cfg.vocab_size)
        .map_err(|e| CliError::usage(format!("model.vocab_size: {e}")))?;

    let mut trainer = Trainer::new(&model_cfg, &cfg.training, &tokens).map_err(train_error)?;

    let out = cfg.paths.output_dir.clone();
    if out.join(MANIFEST_FILE).exists() {
        if !opts.force {
            return Err(CliError::usage(format!(
                "paths.output_dir: {} already contains a run (pass --force to replace it)",
                out.display()
            )));
        }
        fs::remove_dir_all(&out)
            .map_err(|e| CliError::runtime(format!("cannot clear {}: {e}", out.display())))?;
    }

    let header = RunHeader {
        model_id: cfg.resolved_model_id(),
        model_config: model_cfg,
        train_config: cfg.training.clone(),
        schedule: trainer.schedule().to_vec(),
        corpus_digest: corpus_digest(&tokens),
        corpus_tokens: tokens.len() as u64,
        analysis: cfg.metrics,
    };
    let total = cfg.training.total_steps;
    let mut writer = RunWriter::create(&out, header, &trainer.eval_batch()).map_err(store_error)?;
    trainer
        .run(|record| {
            if !opts.quiet {
                eprintln!(
                    "step {:>7}/{total}  eval_loss {:.4}",
                    record.checkpoint.step, record.checkpoint.eval_loss
                );
            }
            writer.write_record(&record).map_err(Into::into)
        })
        .map_err(train_error)?;
    writer.finalize().map_err(store_error)?;
    Ok(out)
}

pub(crate) fn store_error(e: store::StoreError) -> CliError {
    match e {
        store::StoreError::Locked(_) => CliError::usage(e.to_string()),
        other => CliError::runtime(other.to_string()),
    }
}
