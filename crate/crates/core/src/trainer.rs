//! Deterministic next-token training with checkpointing.
//!
//! Updates use Adam (β₁ = 0.9, β₂ = 0.95, ε = 1e-8, no weight decay) under a
//! linear-warmup cosine learning-rate schedule. At every scheduled step the
//! trainer evaluates the current parameters on a fixed evaluation batch (the
//! last training batch of the run) and records the loss, the write-matrix
//! gradients and the residual-stream writes.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{check_vocab, BatchPlan, DataError};
use crate::linalg::Matrix;
use crate::model::{
    backward, forward_batch, Gradients, ModelConfig, ModelError, ModelParams, ResidualTrace,
    WriteKind,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;

pub type SinkError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at step {step}; write-matrix norms per layer (att, mlp): {layer_norms:?}")]
    NonFiniteLoss {
        step: u64,
        layer_norms: Vec<(f64, f64)>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint sink failed at step {step}: {source}")]
    Sink { step: u64, source: SinkError },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub min_lr_fraction: f64,
    pub seed: u64,
    pub linear_ckpt_interval: u64,
    pub log_ckpt_cap: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return err(format!(
                "min_lr_fraction must lie in [0, 1], got {}",
                self.min_lr_fraction
            ));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return err(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        checkpoint_steps(self.total_steps, self.log_ckpt_cap, self.linear_ckpt_interval)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<Vec<u64>> {
        checkpoint_steps(self.total_steps, self.log_ckpt_cap, self.linear_ckpt_interval)
    }
}

/// Steps at which checkpoints are taken: `0`, every power of two up to
/// `cap`, every multiple of `interval`, and `total_steps`, ascending and
/// deduplicated. A zero-step run has the single checkpoint `[0]`.
pub fn checkpoint_steps(total_steps: u64, cap: u64, interval: u64) -> Result<Vec<u64>> {
    if total_steps == 0 {
        return Ok(vec![0]);
    }
    if cap == 0 || !cap.is_power_of_two() {
        return Err(TrainError::Config(format!(
            "log_ckpt_cap must be a power of two, got {cap}"
        )));
    }
    if cap > total_steps {
        return Err(TrainError::Config(format!(
            "log_ckpt_cap ({cap}) exceeds total_steps ({total_steps})"
        )));
    }
    if interval == 0 || interval > total_steps {
        return Err(TrainError::Config(format!(
            "linear_ckpt_interval must be in 1..={total_steps}, got {interval}"
        )));
    }
    let mut steps = BTreeSet::from([0, total_steps]);
    let mut p = 1;
    while p <= cap {
        steps.insert(p);
        p *= 2;
    }
    steps.extend((1..=total_steps / interval).map(|k| k * interval));
    Ok(steps.into_iter().collect())
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to
/// `min_lr_fraction * base_lr` at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let base = cfg.base_lr;
    if step < cfg.warmup_steps {
        return base * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return base;
    }
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let cosine = 0.5 * (1.0 + (PI * progress).cos());
    base * (cfg.min_lr_fraction + (1.0 - cfg.min_lr_fraction) * cosine)
}

/// Loss, gradients and captured writes for one batch.
pub struct Evaluation {
    pub loss: f64,
    pub gradients: Gradients,
    pub trace: ResidualTrace,
}

/// Mean next-token cross-entropy over every position that has a successor,
/// and its exact gradient through the model.
pub fn evaluate<S: AsRef<[u32]>>(params: &ModelParams, batch: &[S]) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let (logits, trace, cache) = forward_batch(params, batch)?;
    let predictions: usize = batch.iter().map(|s| s.as_ref().len() - 1).sum();
    if predictions == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let inv = 1.0 / predictions as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    let mut row = 0;
    for seq in batch {
        let seq = seq.as_ref();
        for t in 0..seq.len() {
            if t + 1 < seq.len() {
                let target = seq[t + 1] as usize;
                let z = logits.row(row);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
                let log_norm = max + sum.ln();
                loss += log_norm - z[target];
                let d = dlogits.row_mut(row);
                for (dv, zv) in d.iter_mut().zip(z) {
                    *dv = (zv - log_norm).exp() * inv;
                }
                d[target] -= inv;
            }
            row += 1;
        }
    }
    let gradients = backward(params, &cache, &dlogits)?;
    Ok(Evaluation {
        loss: loss * inv,
        gradients,
        trace,
    })
}

pub fn loss_and_gradients<S: AsRef<[u32]>>(
    params: &ModelParams,
    batch: &[S],
) -> Result<(f64, Gradients)> {
    let e = evaluate(params, batch)?;
    Ok((e.loss, e.gradients))
}

/// Adam moments, laid out like the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Number of updates applied so far.
    pub step: u64,
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
}

impl OptimizerState {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            step: 0,
            first_moment: ModelParams::zeros(config),
            second_moment: ModelParams::zeros(config),
        }
    }

    /// One bias-corrected Adam update.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let tensors = params
            .matrices_mut()
            .into_iter()
            .zip(grads.matrices())
            .zip(self.first_moment.matrices_mut())
            .zip(self.second_moment.matrices_mut());
        for (((p, g), m), v) in tensors {
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut());
            for (((p, &g), m), v) in it {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Gradients of one layer's two write matrices, `[D x H]` like
/// [`ModelParams::write_matrix`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriteGradients {
    pub att: Matrix,
    pub mlp: Matrix,
}

impl WriteGradients {
    pub fn get(&self, kind: WriteKind) -> &Matrix {
        match kind {
            WriteKind::Att => &self.att,
            WriteKind::Mlp => &self.mlp,
        }
    }

    pub fn from_gradients(grads: &Gradients) -> Vec<WriteGradients> {
        grads
            .layers
            .iter()
            .map(|l| WriteGradients {
                att: l.w_o.transpose(),
                mlp: l.w_proj.transpose(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ModelParams,
    pub optimizer_state: OptimizerState,
    pub write_gradients: Vec<WriteGradients>,
    pub eval_loss: f64,
}

/// A checkpoint plus the residual-stream writes captured on the
/// evaluation batch.
pub struct CheckpointRecord {
    pub checkpoint: Checkpoint,
    pub activations: ResidualTrace,
}

pub struct Trainer {
    train_config: TrainConfig,
    plan: BatchPlan,
    schedule: Vec<u64>,
    params: ModelParams,
    optimizer: OptimizerState,
    /// Whether the checkpoint for the current step still has to be emitted.
    pending_current: bool,
}

impl Trainer {
    /// Fresh run with seeded initialization.
    pub fn new(
        model_config: &ModelConfig,
        train_config: &TrainConfig,
        corpus: &[u32],
    ) -> Result<Self> {
        model_config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        let params = ModelParams::init(model_config, &mut rng);
        Self::build(model_config, train_config, corpus, params, OptimizerState::new(model_config), true)
    }

    /// Continues a run from a saved checkpoint. The checkpoint's own step is
    /// not emitted again.
    pub fn resume(
        model_config: &ModelConfig,
        train_config: &TrainConfig,
        corpus: &[u32],
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        if checkpoint.params.config != *model_config {
            return Err(TrainError::Config("checkpoint was produced by a different model config".into()));
        }
        if checkpoint.optimizer_state.step != checkpoint.step {
            return Err(TrainError::Config(format!(
                "optimizer state is at step {} but checkpoint is at {}",
                checkpoint.optimizer_state.step, checkpoint.step
            )));
        }
        if checkpoint.step > train_config.total_steps {
            return Err(TrainError::Config("checkpoint lies beyond total_steps".into()));
        }
        Self::build(
            model_config,
            train_config,
            corpus,
            checkpoint.params,
            checkpoint.optimizer_state,
            false,
        )
    }

    fn build(
        model_config: &ModelConfig,
        train_config: &TrainConfig,
        corpus: &[u32],
        params: ModelParams,
        optimizer: OptimizerState,
        pending_current: bool,
    ) -> Result<Self> {
        train_config.validate()?;
        check_vocab(corpus, model_config.vocab_size)?;
        let plan = BatchPlan::new(
            corpus,
            model_config.context_len,
            train_config.batch_size,
            train_config.total_steps,
            train_config.seed,
        )?;
        Ok(Self {
            schedule: train_config.schedule()?,
            train_config: train_config.clone(),
            plan,
            params,
            optimizer,
            pending_current,
        })
    }

    pub fn schedule(&self) -> &[u64] {
        &self.schedule
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn eval_batch(&self) -> Vec<Vec<u32>> {
        self.plan.eval_batch()
    }

    fn snapshot(&self, eval_batch: &[Vec<u32>]) -> Result<CheckpointRecord> {
        let eval = evaluate(&self.params, eval_batch)?;
        if !eval.loss.is_finite() {
            return Err(self.non_finite(self.optimizer.step));
        }
        Ok(CheckpointRecord {
            checkpoint: Checkpoint {
                step: self.optimizer.step,
                params: self.params.clone(),
                optimizer_state: self.optimizer.clone(),
                write_gradients: WriteGradients::from_gradients(&eval.gradients),
                eval_loss: eval.loss,
            },
            activations: eval.trace,
        })
    }

    fn non_finite(&self, step: u64) -> TrainError {
        let layer_norms = self
            .params
            .layers
            .iter()
            .map(|l| (l.w_o.frobenius_norm(), l.w_proj.frobenius_norm()))
            .collect();
        TrainError::NonFiniteLoss { step, layer_norms }
    }

    /// Trains to `total_steps`, handing every scheduled checkpoint to `sink`
    /// in step order.
    pub fn run<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(CheckpointRecord) -> std::result::Result<(), SinkError>,
    {
        let eval_batch = self.plan.eval_batch();
        let mut emit = |this: &Self| -> Result<()> {
            let record = this.snapshot(&eval_batch)?;
            let step = record.checkpoint.step;
            sink(record).map_err(|source| TrainError::Sink { step, source })
        };
        if self.pending_current && self.schedule.binary_search(&self.optimizer.step).is_ok() {
            emit(self)?;
        }
        self.pending_current = false;
        while self.optimizer.step < self.train_config.total_steps {
            let step = self.optimizer.step + 1;
            let (loss, grads) = loss_and_gradients(&self.params, &self.plan.batch(step))?;
            if !loss.is_finite() {
                return Err(self.non_finite(step));
            }
            let lr = lr_at(step, &self.train_config);
            self.optimizer.apply(&mut self.params, &grads, lr);
            if self.schedule.binary_search(&step).is_ok() {
                emit(self)?;
            }
        }
        Ok(())
    }
}

/// Runs a fresh training job and returns every checkpoint.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    corpus: &[u32],
) -> Result<Vec<Checkpoint>> {
    let mut trainer = Trainer::new(model_config, train_config, corpus)?;
    let mut out = Vec::new();
    trainer.run(|rec| {
        out.push(rec.checkpoint);
        Ok(())
    })?;
    Ok(out)
}
