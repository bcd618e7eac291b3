use super::{LayerParams, ModelConfig, ModelError, ModelParams, Result, WriteKind};
use crate::linalg::{matmul, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

/// `d/dx [x * Φ(x)] = Φ(x) + x φ(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub(crate) struct NormCache {
    pub xhat: Matrix,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, NormCache) {
    let d = x.cols();
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.rows());
    let mut out = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        rstd.push(s);
        let (g, b) = (gain.data(), bias.data());
        for ((o, h), (gi, bi)) in out.row_mut(r).iter_mut().zip(xhat.row(r)).zip(g.iter().zip(b)) {
            *o = h * gi + bi;
        }
    }
    (out, NormCache { xhat, rstd })
}

fn add_row_bias(m: &mut Matrix, bias: &Matrix) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
}

/// Contiguous row ranges `(start, len)`, one per sequence.
pub(crate) type Segments = Vec<(usize, usize)>;

pub(crate) struct AttnCache {
    pub xn: Matrix,
    pub norm: NormCache,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Causal softmax rows per (segment, head), `len x len` row-major.
    pub probs: Vec<Vec<f64>>,
    pub z: Matrix,
}

pub(crate) struct MlpCache {
    pub xn: Matrix,
    pub norm: NormCache,
    pub pre: Matrix,
    pub act: Matrix,
}

pub(crate) fn attention_forward(
    x: &Matrix,
    lp: &LayerParams,
    cfg: &ModelConfig,
    segments: &Segments,
) -> Result<(Matrix, AttnCache)> {
    let (xn, norm) = layer_norm(x, &lp.ln1_gain, &lp.ln1_bias);
    let q = matmul(&xn, &lp.w_q)?;
    let k = matmul(&xn, &lp.w_k)?;
    let v = matmul(&xn, &lp.w_v)?;
    let hd = cfg.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut z = Matrix::zeros(x.rows(), cfg.attention_hidden());
    let mut probs = Vec::with_capacity(segments.len() * cfg.num_heads);
    let mut scores = Vec::new();
    for &(start, len) in segments {
        for h in 0..cfg.num_heads {
            let cols = h * hd..(h + 1) * hd;
            let mut p = vec![0.0; len * len];
            for i in 0..len {
                let qi = &q.row(start + i)[cols.clone()];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k.row(start + j)[cols.clone()];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let prow = &mut p[i * len..i * len + i + 1];
                for (pj, s) in prow.iter_mut().zip(&scores) {
                    *pj = s / denom;
                }
                let zi = &mut z.row_mut(start + i)[cols.clone()];
                for (j, &pij) in prow.iter().enumerate() {
                    let vj = &v.row(start + j)[cols.clone()];
                    for (zc, vc) in zi.iter_mut().zip(vj) {
                        *zc += pij * vc;
                    }
                }
            }
            probs.push(p);
        }
    }
    let write = matmul(&z, &lp.w_o)?;
    Ok((
        write,
        AttnCache {
            xn,
            norm,
            q,
            k,
            v,
            probs,
            z,
        },
    ))
}

pub(crate) fn mlp_forward(x: &Matrix, lp: &LayerParams) -> Result<(Matrix, MlpCache)> {
    let (xn, norm) = layer_norm(x, &lp.ln2_gain, &lp.ln2_bias);
    let mut pre = matmul(&xn, &lp.w_in)?;
    add_row_bias(&mut pre, &lp.b_in);
    let mut act = pre.clone();
    act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let mut write = matmul(&act, &lp.w_proj)?;
    add_row_bias(&mut write, &lp.b_proj);
    Ok((write, MlpCache { xn, norm, pre, act }))
}

fn check_shape(x: &Matrix, cfg: &ModelConfig) -> Result<()> {
    if x.cols() != cfg.model_dim {
        return Err(ModelError::Config(format!(
            "stream width {} does not match model_dim {}",
            x.cols(),
            cfg.model_dim
        )));
    }
    Ok(())
}

/// Attention write for a single causal sequence `x` (`[T x D]`), i.e. the
/// addend to the stream after `W_O`, not the updated stream.
pub fn attention_block(x: &Matrix, params: &ModelParams, layer: usize) -> Result<Matrix> {
    check_shape(x, &params.config)?;
    let lp = layer_params(params, layer)?;
    Ok(attention_forward(x, lp, &params.config, &vec![(0, x.rows())])?.0)
}

/// MLP write for `x` (`[T x D]`).
pub fn mlp_block(x: &Matrix, params: &ModelParams, layer: usize) -> Result<Matrix> {
    check_shape(x, &params.config)?;
    Ok(mlp_forward(x, layer_params(params, layer)?)?.0)
}

fn layer_params(params: &ModelParams, layer: usize) -> Result<&LayerParams> {
    params.layers.get(layer).ok_or(ModelError::LayerOutOfRange {
        layer,
        layers: params.layers.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub att_write: Matrix,
    pub mlp_write: Matrix,
}

/// Residual-stream writes captured during a forward pass. Rows are the
/// positions of all input sequences, stacked in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    /// `x_0`, token plus position embeddings.
    pub embedding: Matrix,
    pub layers: Vec<LayerTrace>,
    /// `x_L`, the stream before the final norm.
    pub final_stream: Matrix,
}

impl ResidualTrace {
    pub fn write(&self, layer: usize, kind: WriteKind) -> &Matrix {
        let l = &self.layers[layer];
        match kind {
            WriteKind::Att => &l.att_write,
            WriteKind::Mlp => &l.mlp_write,
        }
    }

    /// `x_0 + Σ_l (att_l + mlp_l)`.
    pub fn reconstruct(&self) -> Matrix {
        let mut x = self.embedding.clone();
        for l in &self.layers {
            x.add_assign(&l.att_write);
            x.add_assign(&l.mlp_write);
        }
        x
    }
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache {
    pub(crate) segments: Segments,
    pub(crate) tokens: Vec<u32>,
    pub(crate) attn: Vec<AttnCache>,
    pub(crate) mlp: Vec<MlpCache>,
    pub(crate) final_norm: NormCache,
    pub(crate) final_xn: Matrix,
}

/// Forward pass over one sequence.
pub fn forward(params: &ModelParams, tokens: &[u32]) -> Result<(Matrix, ResidualTrace)> {
    let (logits, trace, _) = forward_batch(params, &[tokens])?;
    Ok((logits, trace))
}

/// Forward pass over several independent sequences stacked row-wise.
/// Attention never crosses sequence boundaries.
pub fn forward_batch<S: AsRef<[u32]>>(
    params: &ModelParams,
    seqs: &[S],
) -> Result<(Matrix, ResidualTrace, ForwardCache)> {
    let cfg = &params.config;
    if seqs.is_empty() {
        return Err(ModelError::EmptyInput("no sequences"));
    }
    let mut segments = Vec::with_capacity(seqs.len());
    let mut tokens = Vec::new();
    for s in seqs {
        let s = s.as_ref();
        if s.is_empty() {
            return Err(ModelError::EmptyInput("empty sequence"));
        }
        if s.len() > cfg.context_len {
            return Err(ModelError::SequenceTooLong {
                len: s.len(),
                max: cfg.context_len,
            });
        }
        if let Some(&bad) = s.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                token: bad,
                vocab: cfg.vocab_size,
            });
        }
        segments.push((tokens.len(), s.len()));
        tokens.extend_from_slice(s);
    }

    let mut x = Matrix::zeros(tokens.len(), cfg.model_dim);
    for &(start, len) in &segments {
        for pos in 0..len {
            let r = start + pos;
            let tok = params.token_embedding.row(tokens[r] as usize);
            let posv = params.position_embedding.row(pos);
            for ((o, a), b) in x.row_mut(r).iter_mut().zip(tok).zip(posv) {
                *o = a + b;
            }
        }
    }
    let embedding = x.clone();

    let mut layers = Vec::with_capacity(cfg.num_layers);
    let mut attn_caches = Vec::with_capacity(cfg.num_layers);
    let mut mlp_caches = Vec::with_capacity(cfg.num_layers);
    for lp in &params.layers {
        let (att_write, ac) = attention_forward(&x, lp, cfg, &segments)?;
        x.add_assign(&att_write);
        let (mlp_write, mc) = mlp_forward(&x, lp)?;
        x.add_assign(&mlp_write);
        layers.push(LayerTrace {
            att_write,
            mlp_write,
        });
        attn_caches.push(ac);
        mlp_caches.push(mc);
    }

    let (final_xn, final_norm) = layer_norm(&x, &params.final_gain, &params.final_bias);
    let logits = matmul(&final_xn, &params.unembedding)?;
    let trace = ResidualTrace {
        embedding,
        layers,
        final_stream: x,
    };
    let cache = ForwardCache {
        segments,
        tokens,
        attn: attn_caches,
        mlp: mlp_caches,
        final_norm,
        final_xn,
    };
    Ok((logits, trace, cache))
}
