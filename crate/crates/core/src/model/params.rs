use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Result, WriteKind};
use crate::linalg::Matrix;

const INIT_STD: f64 = 0.02;

/// Weights of one transformer layer. Vectors are stored as `[1 x n]` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// `[H_att x D]`, writes the concatenated heads into the stream.
    pub w_o: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_in: Matrix,
    pub b_in: Matrix,
    /// `[H_mlp x D]`, writes the MLP hidden state into the stream.
    pub w_proj: Matrix,
    pub b_proj: Matrix,
}

const LAYER_TENSORS: [&str; 12] = [
    "ln1.gain", "ln1.bias", "attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o", "ln2.gain", "ln2.bias",
    "mlp.w_in", "mlp.b_in", "mlp.w_proj", "mlp.b_proj",
];

impl LayerParams {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (d, ha, hm) = (cfg.model_dim, cfg.attention_hidden(), cfg.mlp_hidden);
        Self {
            ln1_gain: Matrix::zeros(1, d),
            ln1_bias: Matrix::zeros(1, d),
            w_q: Matrix::zeros(d, ha),
            w_k: Matrix::zeros(d, ha),
            w_v: Matrix::zeros(d, ha),
            w_o: Matrix::zeros(ha, d),
            ln2_gain: Matrix::zeros(1, d),
            ln2_bias: Matrix::zeros(1, d),
            w_in: Matrix::zeros(d, hm),
            b_in: Matrix::zeros(1, hm),
            w_proj: Matrix::zeros(hm, d),
            b_proj: Matrix::zeros(1, d),
        }
    }

    fn matrices(&self) -> [&Matrix; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_in,
            &self.b_in,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn matrices_mut(&mut self) -> [&mut Matrix; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

/// Full parameter set of the model.
///
/// The same structure doubles as a gradient buffer and as Adam moment
/// storage, so every per-parameter loop goes through [`Self::matrices`] in a
/// single fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_gain: Matrix,
    pub final_bias: Matrix,
    pub unembedding: Matrix,
}

impl ModelParams {
    /// All-zero parameters, layer-norm gains included.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.model_dim;
        Self {
            config: config.clone(),
            token_embedding: Matrix::zeros(config.vocab_size, d),
            position_embedding: Matrix::zeros(config.context_len, d),
            layers: (0..config.num_layers).map(|_| LayerParams::zeros(config)).collect(),
            final_gain: Matrix::zeros(1, d),
            final_bias: Matrix::zeros(1, d),
            unembedding: Matrix::zeros(d, config.vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Depth-scaled small init: `N(0, 0.02 / sqrt(2L))` for the write
    /// matrices, `N(0, 0.02)` for every other weight, unit gains, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let base = Normal::new(0.0, INIT_STD).expect("valid std");
        let write = Normal::new(0.0, INIT_STD / (2.0 * config.num_layers as f64).sqrt())
            .expect("valid std");
        let mut fill = |m: &mut Matrix, dist: &Normal<f64>| {
            m.data_mut().iter_mut().for_each(|v| *v = dist.sample(rng));
        };
        fill(&mut p.token_embedding, &base);
        fill(&mut p.position_embedding, &base);
        for layer in &mut p.layers {
            layer.ln1_gain.fill(1.0);
            fill(&mut layer.w_q, &base);
            fill(&mut layer.w_k, &base);
            fill(&mut layer.w_v, &base);
            fill(&mut layer.w_o, &write);
            layer.ln2_gain.fill(1.0);
            fill(&mut layer.w_in, &base);
            fill(&mut layer.w_proj, &write);
        }
        p.final_gain.fill(1.0);
        fill(&mut p.unembedding, &base);
        p
    }

    /// Tensor names in storage order.
    pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
        let mut names = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        for l in 0..config.num_layers {
            names.extend(LAYER_TENSORS.iter().map(|t| format!("layers.{l}.{t}")));
        }
        names.extend(["final_norm.gain", "final_norm.bias", "unembedding"].map(String::from));
        names
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            out.extend(layer.matrices());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.unembedding]);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.matrices_mut());
        }
        out.extend([&mut self.final_gain, &mut self.final_bias, &mut self.unembedding]);
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        Self::tensor_names(&self.config)
            .into_iter()
            .zip(self.matrices())
            .collect()
    }

    /// Rebuilds parameters from named tensors, checking every shape.
    pub fn from_named_tensors(
        config: &ModelConfig,
        mut tensors: BTreeMap<String, Matrix>,
    ) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let names = Self::tensor_names(config);
        for (name, slot) in names.iter().zip(params.matrices_mut()) {
            let m = tensors.remove(name).ok_or_else(|| ModelError::Tensor {
                name: name.clone(),
                reason: "missing".into(),
            })?;
            if m.shape() != slot.shape() {
                return Err(ModelError::Tensor {
                    name: name.clone(),
                    reason: format!("shape {:?}, expected {:?}", m.shape(), slot.shape()),
                });
            }
            *slot = m;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(ModelError::Tensor {
                name: extra.clone(),
                reason: "not part of the model".into(),
            });
        }
        Ok(params)
    }

    pub fn num_parameters(&self) -> usize {
        self.matrices().iter().map(|m| m.data().len()).sum()
    }

    /// The write matrix `θ_l` of a branch in `[D x H]` orientation (a copy).
    pub fn write_matrix(&self, layer: usize, kind: WriteKind) -> Result<Matrix> {
        let l = self.layers.get(layer).ok_or(ModelError::LayerOutOfRange {
            layer,
            layers: self.layers.len(),
        })?;
        Ok(match kind {
            WriteKind::Att => l.w_o.transpose(),
            WriteKind::Mlp => l.w_proj.transpose(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }
}
