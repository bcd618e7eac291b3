//! Core library for studying layer-wise convergence dynamics of small
//! decoder-only transformers.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense matrices, products, centering and singular values.
//! - [`model`]: a pre-norm transformer whose forward pass exposes the
//!   attention and MLP writes into the residual stream.
//! - [`trainer`]: next-token training with a fixed checkpoint schedule and
//!   write-matrix gradient capture on a frozen evaluation batch.
//! - [`metrics`]: linear CKA, effective rank and proportional effective rank.
//! - [`analysis`]: percentile bands, layer means, convergence flags and MCC.
//! - [`store`]: the binary tensor format and run manifests.

pub mod analysis;
pub mod data;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod store;
pub mod trainer;

pub use linalg::{Matrix, SingularSpectrum};
pub use model::{ModelConfig, ModelParams, WriteKind};
