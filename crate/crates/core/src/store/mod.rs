//! Persistence for runs: a minimal binary tensor format, content hashes and
//! a JSON manifest.
//!
//! A run directory looks like:
//!
//! ```text
//! run/
//!   manifest.json            finalized inventory, see [`RunManifest`]
//!   manifest.fnv1a64         hex digest of manifest.json
//!   eval_batch.dlt           i32 [batch x seq_len]
//!   checkpoints/step_00000016/{params,optimizer,write_grads}.dlt
//!   activations/step_00000016/layer_00_att.dlt
//! ```
//!
//! Every file listed in the manifest carries a 64-bit FNV-1a digest of its
//! full contents, so any single-byte change is detected on load.

mod manifest;
mod run;
mod tensor;

use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelError;

pub use manifest::{
    ActivationEntry, AnalysisSettings, CheckpointEntry, FileEntry, RunManifest, MANIFEST_DIGEST_FILE,
    MANIFEST_FILE,
};
pub use run::{
    load_activations, load_checkpoint, read_manifest, save_activations, save_checkpoint, RunHeader,
    RunReader, RunWriter,
};
pub use tensor::{
    decode_tensors, encode_tensor, read_tensor_file, write_tensor_file, DType, Tensor, TensorData,
    FORMAT_VERSION, MAGIC,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed tensor data: {0}")]
    Format(String),
    #[error("{path}: content hash {actual} does not match manifest ({expected})")]
    Integrity {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("{path}: invalid manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, StoreError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> StoreError {
    let path = path.into();
    move |source| StoreError::Io { path, source }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

/// Digest of a token stream, hashed as little-endian u32 values.
pub fn corpus_digest(tokens: &[u32]) -> String {
    let mut h = FNV_OFFSET;
    for t in tokens {
        for b in t.to_le_bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
    }
    format!("{h:016x}")
}
