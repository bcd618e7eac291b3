use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use super::manifest::AnalysisSettings;
use super::{
    decode_tensors, io_err, write_tensor_file, ActivationEntry, CheckpointEntry, FileEntry, Result,
    RunManifest, StoreError, Tensor, FORMAT_VERSION,
};
use crate::linalg::Matrix;
use crate::model::{ModelConfig, ModelParams, ResidualTrace, WriteKind};
use crate::trainer::{Checkpoint, CheckpointRecord, OptimizerState, TrainConfig, WriteGradients};

const LOCK_FILE: &str = ".lock";
const EVAL_BATCH_FILE: &str = "eval_batch.dlt";

fn checkpoint_dir(step: u64) -> String {
    format!("checkpoints/step_{step:08}")
}

fn activation_path(step: u64, layer: usize, kind: WriteKind) -> String {
    format!("activations/step_{step:08}/layer_{layer:02}_{kind}.dlt")
}

fn write_file(run_dir: &Path, rel: String, tensors: &[Tensor]) -> Result<FileEntry> {
    let bytes = write_tensor_file(&run_dir.join(&rel), tensors)?;
    Ok(FileEntry::of(rel, &bytes))
}

fn read_file(run_dir: &Path, entry: &FileEntry) -> Result<Vec<Tensor>> {
    decode_tensors(&entry.read_verified(run_dir)?)
}

fn to_map(tensors: Vec<Tensor>, prefix: &str) -> Result<BTreeMap<String, Matrix>> {
    tensors
        .into_iter()
        .map(|t| {
            let name = t
                .name
                .strip_prefix(prefix)
                .ok_or_else(|| StoreError::Format(format!("unexpected tensor {}", t.name)))?
                .to_string();
            Ok((name, t.to_matrix()?))
        })
        .collect()
}

fn params_tensors(p: &ModelParams, prefix: &str) -> Vec<Tensor> {
    p.named_tensors()
        .into_iter()
        .map(|(name, m)| Tensor::from_matrix(format!("{prefix}{name}"), m))
        .collect()
}

/// Writes the three files of a checkpoint under `run_dir` and returns the
/// entry describing them. The manifest is not touched.
pub fn save_checkpoint(run_dir: &Path, ckpt: &Checkpoint) -> Result<CheckpointEntry> {
    let dir = checkpoint_dir(ckpt.step);
    let params = write_file(run_dir, format!("{dir}/params.dlt"), &params_tensors(&ckpt.params, ""))?;
    let mut moments = params_tensors(&ckpt.optimizer_state.first_moment, "adam_m.");
    moments.extend(params_tensors(&ckpt.optimizer_state.second_moment, "adam_v."));
    let optimizer = write_file(run_dir, format!("{dir}/optimizer.dlt"), &moments)?;
    let grads: Vec<Tensor> = ckpt
        .write_gradients
        .iter()
        .enumerate()
        .flat_map(|(l, g)| {
            WriteKind::ALL
                .map(|k| Tensor::from_matrix(format!("layers.{l}.{k}"), g.get(k)))
                .into_iter()
        })
        .collect();
    let write_grads = write_file(run_dir, format!("{dir}/write_grads.dlt"), &grads)?;
    Ok(CheckpointEntry {
        step: ckpt.step,
        eval_loss: ckpt.eval_loss,
        params,
        optimizer,
        write_grads,
    })
}

fn decode_params(run_dir: &Path, config: &ModelConfig, entry: &CheckpointEntry) -> Result<ModelParams> {
    Ok(ModelParams::from_named_tensors(config, to_map(read_file(run_dir, &entry.params)?, "")?)?)
}

fn decode_write_gradients(
    run_dir: &Path,
    config: &ModelConfig,
    entry: &CheckpointEntry,
) -> Result<Vec<WriteGradients>> {
    let mut grads = to_map(read_file(run_dir, &entry.write_grads)?, "layers.")?;
    let mut take = |l: usize, k: WriteKind| {
        grads
            .remove(&format!("{l}.{k}"))
            .ok_or_else(|| StoreError::Format(format!("write gradient layers.{l}.{k} missing")))
    };
    (0..config.num_layers)
        .map(|l| {
            Ok(WriteGradients {
                att: take(l, WriteKind::Att)?,
                mlp: take(l, WriteKind::Mlp)?,
            })
        })
        .collect()
}

fn decode_checkpoint(run_dir: &Path, config: &ModelConfig, entry: &CheckpointEntry) -> Result<Checkpoint> {
    let params = decode_params(run_dir, config, entry)?;
    let (m, v): (Vec<Tensor>, Vec<Tensor>) = read_file(run_dir, &entry.optimizer)?
        .into_iter()
        .partition(|t| t.name.starts_with("adam_m."));
    let optimizer_state = OptimizerState {
        step: entry.step,
        first_moment: ModelParams::from_named_tensors(config, to_map(m, "adam_m.")?)?,
        second_moment: ModelParams::from_named_tensors(config, to_map(v, "adam_v.")?)?,
    };
    Ok(Checkpoint {
        step: entry.step,
        params,
        optimizer_state,
        write_gradients: decode_write_gradients(run_dir, config, entry)?,
        eval_loss: entry.eval_loss,
    })
}

/// Loads the checkpoint at `step`, verifying every digest on the way.
pub fn load_checkpoint(run_dir: &Path, step: u64) -> Result<Checkpoint> {
    RunReader::open(run_dir)?.load_checkpoint(step)
}

/// Writes one `[rows x D]` activation matrix and returns its entry.
pub fn save_activations(
    run_dir: &Path,
    step: u64,
    layer: usize,
    kind: WriteKind,
    activations: &Matrix,
) -> Result<ActivationEntry> {
    let tensor = Tensor::from_matrix(format!("layers.{layer}.{kind}"), activations);
    let file = write_file(run_dir, activation_path(step, layer, kind), &[tensor])?;
    Ok(ActivationEntry {
        step,
        layer,
        kind,
        rows: activations.rows(),
        file,
    })
}

pub fn load_activations(run_dir: &Path, step: u64, layer: usize, kind: WriteKind) -> Result<Matrix> {
    RunReader::open(run_dir)?.load_activations(step, layer, kind)
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    RunManifest::read(run_dir)
}

/// Everything the manifest records before the first checkpoint arrives.
#[derive(Debug, Clone)]
pub struct RunHeader {
    pub model_id: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub schedule: Vec<u64>,
    pub corpus_digest: String,
    pub corpus_tokens: u64,
    pub analysis: AnalysisSettings,
}

/// Exclusive writer for one run directory. Holds a lock file until it is
/// finalized or dropped.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    manifest: RunManifest,
    lock: Option<PathBuf>,
}

impl RunWriter {
    /// Creates `dir` if needed, takes the lock and writes the evaluation
    /// batch. Fails if `dir` already holds a manifest.
    pub fn create(dir: &Path, header: RunHeader, eval_batch: &[Vec<u32>]) -> Result<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let lock = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(StoreError::Locked(dir.to_path_buf()))
            }
            Err(e) => return Err(io_err(&lock)(e)),
        }
        let mut writer = Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                format_version: FORMAT_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                model_id: header.model_id,
                model_config: header.model_config,
                train_config: header.train_config,
                schedule: header.schedule,
                corpus_digest: header.corpus_digest,
                corpus_tokens: header.corpus_tokens,
                analysis: header.analysis,
                eval_batch: FileEntry::of(String::new(), &[]),
                checkpoints: Vec::new(),
                activations: Vec::new(),
                finalized: false,
            },
            lock: Some(lock),
        };
        if dir.join(super::MANIFEST_FILE).exists() {
            return Err(StoreError::Format(format!(
                "{} already contains a run",
                dir.display()
            )));
        }
        let seq_len = eval_batch.first().map_or(0, Vec::len);
        if eval_batch.iter().any(|s| s.len() != seq_len) {
            return Err(StoreError::Format("evaluation sequences differ in length".into()));
        }
        let flat: Vec<u32> = eval_batch.concat();
        let tensor = Tensor::from_tokens("eval_batch", &flat, eval_batch.len(), seq_len);
        writer.manifest.eval_batch = write_file(dir, EVAL_BATCH_FILE.into(), &[tensor])?;
        writer.manifest.write(dir)?;
        Ok(writer)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Persists a checkpoint and all of its activations, then rewrites the
    /// (still unfinalized) manifest.
    pub fn write_record(&mut self, record: &CheckpointRecord) -> Result<()> {
        let step = record.checkpoint.step;
        let entry = save_checkpoint(&self.dir, &record.checkpoint)?;
        self.manifest.checkpoints.push(entry);
        self.write_trace(step, &record.activations)?;
        self.manifest.write(&self.dir)
    }

    fn write_trace(&mut self, step: u64, trace: &ResidualTrace) -> Result<()> {
        for layer in 0..trace.layers.len() {
            for kind in WriteKind::ALL {
                let entry = save_activations(&self.dir, step, layer, kind, trace.write(layer, kind))?;
                self.manifest.activations.push(entry);
            }
        }
        Ok(())
    }

    /// Marks the run complete and releases the lock.
    pub fn finalize(mut self) -> Result<RunManifest> {
        self.manifest.finalized = true;
        self.manifest.write(&self.dir)?;
        self.release();
        Ok(self.manifest.clone())
    }

    fn release(&mut self) {
        if let Some(lock) = self.lock.take() {
            let _ = fs::remove_file(lock);
        }
    }
}

impl Drop for RunWriter {
    fn drop(&mut self) {
        self.release();
    }
}

/// Read access to a run directory through its manifest.
#[derive(Debug, Clone)]
pub struct RunReader {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunReader {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest::read(dir)?,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn entry(&self, step: u64) -> Result<&CheckpointEntry> {
        self.manifest
            .checkpoint(step)
            .ok_or_else(|| StoreError::NotFound(format!("checkpoint at step {step}")))
    }

    pub fn load_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        decode_checkpoint(&self.dir, &self.manifest.model_config, self.entry(step)?)
    }

    /// Parameters only, skipping the optimizer moments.
    pub fn load_params(&self, step: u64) -> Result<ModelParams> {
        decode_params(&self.dir, &self.manifest.model_config, self.entry(step)?)
    }

    pub fn load_write_gradients(&self, step: u64) -> Result<Vec<WriteGradients>> {
        decode_write_gradients(&self.dir, &self.manifest.model_config, self.entry(step)?)
    }

    pub fn load_activations(&self, step: u64, layer: usize, kind: WriteKind) -> Result<Matrix> {
        let entry = self.manifest.activation(step, layer, kind).ok_or_else(|| {
            StoreError::NotFound(format!("{kind} activations for layer {layer} at step {step}"))
        })?;
        let tensors = read_file(&self.dir, &entry.file)?;
        match &tensors[..] {
            [t] => t.to_matrix(),
            _ => Err(StoreError::Format(format!(
                "{}: expected one tensor, found {}",
                entry.file.path,
                tensors.len()
            ))),
        }
    }

    pub fn eval_batch(&self) -> Result<Vec<Vec<u32>>> {
        let tensors = read_file(&self.dir, &self.manifest.eval_batch)?;
        let t = &tensors[0];
        let cols = *t.dims.last().unwrap_or(&0) as usize;
        let tokens = t.to_tokens()?;
        if cols == 0 {
            return Ok(Vec::new());
        }
        Ok(tokens.chunks(cols).map(<[u32]>::to_vec).collect())
    }

    /// Checks the digest of every file the manifest lists.
    pub fn verify(&self) -> Result<()> {
        for entry in self.manifest.files() {
            entry.read_verified(&self.dir)?;
        }
        Ok(())
    }
}
