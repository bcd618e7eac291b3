//! Token corpora and the deterministic batch order used for training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("corpus has {tokens} tokens, fewer than one sequence of {seq_len}")]
    CorpusTooShort { tokens: usize, seq_len: usize },
    #[error("token id {token} at offset {offset} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange {
        token: u32,
        offset: usize,
        vocab: usize,
    },
    #[error("batch size must be positive")]
    EmptyBatch,
}

/// Byte-level tokenizer: every byte is its own token (vocabulary of 256).
pub fn encode_bytes(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

pub fn check_vocab(tokens: &[u32], vocab_size: usize) -> Result<(), DataError> {
    match tokens.iter().position(|&t| t as usize >= vocab_size) {
        Some(offset) => Err(DataError::TokenOutOfRange {
            token: tokens[offset],
            offset,
            vocab: vocab_size,
        }),
        None => Ok(()),
    }
}

/// The corpus packed into fixed-length sequences, plus the order in which
/// they are consumed.
///
/// Sequences are contiguous windows of `seq_len` tokens with no document
/// masking. Each pass over the corpus uses an independent seeded shuffle, so
/// the batch for a given step depends only on `(seed, step)`.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    sequences: Vec<Vec<u32>>,
    order: Vec<u32>,
    batch_size: usize,
}

impl BatchPlan {
    /// Plans batches for updates `1..=total_steps` (at least one batch, so a
    /// zero-step run still has an evaluation batch).
    pub fn new(
        tokens: &[u32],
        seq_len: usize,
        batch_size: usize,
        total_steps: u64,
        seed: u64,
    ) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::EmptyBatch);
        }
        let n_seq = tokens.len() / seq_len.max(1);
        if n_seq == 0 || seq_len == 0 {
            return Err(DataError::CorpusTooShort {
                tokens: tokens.len(),
                seq_len,
            });
        }
        let sequences: Vec<Vec<u32>> = tokens
            .chunks_exact(seq_len)
            .map(|c| c.to_vec())
            .collect();
        let needed = total_steps.max(1) as usize * batch_size;
        let mut order = Vec::with_capacity(needed);
        let mut epoch = 0u64;
        while order.len() < needed {
            let mut perm: Vec<u32> = (0..n_seq as u32).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch + 1);
            perm.shuffle(&mut rng);
            let take = (needed - order.len()).min(n_seq);
            order.extend_from_slice(&perm[..take]);
            epoch += 1;
        }
        Ok(Self {
            sequences,
            order,
            batch_size,
        })
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_batches(&self) -> u64 {
        (self.order.len() / self.batch_size) as u64
    }

    /// Batch consumed by update `step` (1-based). Panics if out of plan.
    pub fn batch(&self, step: u64) -> Vec<&[u32]> {
        assert!(step >= 1 && step <= self.num_batches(), "step {step} outside plan");
        let start = (step as usize - 1) * self.batch_size;
        self.order[start..start + self.batch_size]
            .iter()
            .map(|&i| self.sequences[i as usize].as_slice())
            .collect()
    }

    /// The last training batch, held fixed for every evaluation.
    pub fn eval_batch(&self) -> Vec<Vec<u32>> {
        self.batch(self.num_batches())
            .into_iter()
            .map(<[u32]>::to_vec)
            .collect()
    }
}
