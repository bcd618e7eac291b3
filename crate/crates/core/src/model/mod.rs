//! Toy decoder-only transformer with residual-stream taps.
//!
//! Each layer updates the stream sequentially, attention first and then the
//! MLP on the intermediate stream:
//!
//! ```text
//! x'  = x_{l-1} + Attention(LN1(x_{l-1}))
//! x_l = x'      + MLP(LN2(x'))
//! ```
//!
//! The two addends are the layer's *write activations*. Normalization sits
//! inside each branch, so the stream stays purely additive and
//! `x_L = x_0 + Σ_l (att_l + mlp_l)` holds exactly up to rounding.
//!
//! Weights use the row-vector convention (`y = x W`). The matrices that
//! write into the residual stream are `W_O` (`[H_att x D]`) and `W_proj`
//! (`[H_mlp x D]`); [`ModelParams::write_matrix`] returns them transposed to
//! the fixed `[D x H]` orientation.

mod backward;
mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::LinalgError;

pub use backward::{backward, Gradients};
pub use forward::{
    attention_block, forward, forward_batch, gelu, gelu_grad, mlp_block, ForwardCache,
    LayerTrace, ResidualTrace, LAYER_NORM_EPS,
};
pub use params::{LayerParams, ModelParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("layer {layer} out of range for a {layers}-layer model")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Which branch writes into the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WriteKind {
    Att,
    Mlp,
}

impl WriteKind {
    pub const ALL: [WriteKind; 2] = [WriteKind::Att, WriteKind::Mlp];

    pub fn as_str(self) -> &'static str {
        match self {
            WriteKind::Att => "att",
            WriteKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for WriteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WriteKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "att" => Ok(WriteKind::Att),
            "mlp" => Ok(WriteKind::Mlp),
            other => Err(format!("unknown write kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub context_len: usize,
}

impl ModelConfig {
    /// Config with `head_dim = model_dim / num_heads` and `mlp_hidden = 4 * model_dim`.
    pub fn new(
        num_layers: usize,
        model_dim: usize,
        num_heads: usize,
        vocab_size: usize,
        context_len: usize,
    ) -> Result<Self> {
        if num_heads == 0 || model_dim % num_heads != 0 {
            return Err(ModelError::Config(format!(
                "model_dim {model_dim} is not divisible by num_heads {num_heads}"
            )));
        }
        let cfg = Self {
            num_layers,
            model_dim,
            num_heads,
            head_dim: model_dim / num_heads,
            mlp_hidden: 4 * model_dim,
            vocab_size,
            context_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_mlp_hidden(mut self, mlp_hidden: usize) -> Self {
        self.mlp_hidden = mlp_hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.num_heads * self.head_dim != self.model_dim {
            return Err(ModelError::Config(format!(
                "num_heads ({}) x head_dim ({}) must equal model_dim ({})",
                self.num_heads, self.head_dim, self.model_dim
            )));
        }
        Ok(())
    }

    /// Width of the concatenated attention heads.
    pub fn attention_hidden(&self) -> usize {
        self.num_heads * self.head_dim
    }

    /// Hidden width `H` of a branch's write matrix.
    pub fn hidden_dim(&self, kind: WriteKind) -> usize {
        match kind {
            WriteKind::Att => self.attention_hidden(),
            WriteKind::Mlp => self.mlp_hidden,
        }
    }
}
