use super::forward::{gelu_grad, AttnCache, ForwardCache, MlpCache, NormCache};
use super::{LayerParams, ModelConfig, ModelError, ModelParams, Result};
use crate::linalg::{matmul_nt, matmul_tn, Matrix};

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Returns the input gradient and writes gain/bias gradients.
fn layer_norm_backward(
    dy: &Matrix,
    cache: &NormCache,
    gain: &Matrix,
    dgain: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let g = gain.data();
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for i in 0..d {
            dgain.data_mut()[i] += dyr[i] * xh[i];
            dbias.data_mut()[i] += dyr[i];
        }
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let dxh = dyr[i] * g[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let s = cache.rstd[r];
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * (dyr[i] * g[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

fn mlp_backward(
    dwrite: &Matrix,
    cache: &MlpCache,
    lp: &LayerParams,
    grad: &mut LayerParams,
) -> Result<Matrix> {
    grad.w_proj = matmul_tn(&cache.act, dwrite)?;
    grad.b_proj = col_sums(dwrite);
    let mut dpre = matmul_nt(dwrite, &lp.w_proj)?;
    for (d, u) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        *d *= gelu_grad(*u);
    }
    grad.w_in = matmul_tn(&cache.xn, &dpre)?;
    grad.b_in = col_sums(&dpre);
    let dxn = matmul_nt(&dpre, &lp.w_in)?;
    Ok(layer_norm_backward(
        &dxn,
        &cache.norm,
        &lp.ln2_gain,
        &mut grad.ln2_gain,
        &mut grad.ln2_bias,
    ))
}

fn attention_backward(
    dwrite: &Matrix,
    cache: &AttnCache,
    lp: &LayerParams,
    cfg: &ModelConfig,
    segments: &[(usize, usize)],
    grad: &mut LayerParams,
) -> Result<Matrix> {
    grad.w_o = matmul_tn(&cache.z, dwrite)?;
    let dz = matmul_nt(dwrite, &lp.w_o)?;
    let hd = cfg.head_dim;
    let scale = 1.0 / (hd as f64).sqrt();
    let n = dwrite.rows();
    let ha = cfg.attention_hidden();
    let mut dq = Matrix::zeros(n, ha);
    let mut dk = Matrix::zeros(n, ha);
    let mut dv = Matrix::zeros(n, ha);
    let mut dp = Vec::new();
    for (si, &(start, len)) in segments.iter().enumerate() {
        for h in 0..cfg.num_heads {
            let p = &cache.probs[si * cfg.num_heads + h];
            let cols = h * hd..(h + 1) * hd;
            for i in 0..len {
                let dzi = &dz.row(start + i)[cols.clone()];
                let prow = &p[i * len..i * len + i + 1];
                // dP_ij = dz_i · v_j, and dv_j += P_ij dz_i
                dp.clear();
                for (j, &pij) in prow.iter().enumerate() {
                    let vj = &cache.v.row(start + j)[cols.clone()];
                    dp.push(dzi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                    let dvj = &mut dv.row_mut(start + j)[cols.clone()];
                    for (o, g) in dvj.iter_mut().zip(dzi) {
                        *o += pij * g;
                    }
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi: Vec<f64> = cache.q.row(start + i)[cols.clone()].to_vec();
                for (j, &pij) in prow.iter().enumerate() {
                    let ds = pij * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &cache.k.row(start + j)[cols.clone()];
                    let dqi = &mut dq.row_mut(start + i)[cols.clone()];
                    for (o, kc) in dqi.iter_mut().zip(kj) {
                        *o += ds * kc;
                    }
                    let dkj = &mut dk.row_mut(start + j)[cols.clone()];
                    for (o, qc) in dkj.iter_mut().zip(&qi) {
                        *o += ds * qc;
                    }
                }
            }
        }
    }
    grad.w_q = matmul_tn(&cache.xn, &dq)?;
    grad.w_k = matmul_tn(&cache.xn, &dk)?;
    grad.w_v = matmul_tn(&cache.xn, &dv)?;
    let mut dxn = matmul_nt(&dq, &lp.w_q)?;
    dxn.add_assign(&matmul_nt(&dk, &lp.w_k)?);
    dxn.add_assign(&matmul_nt(&dv, &lp.w_v)?);
    Ok(layer_norm_backward(
        &dxn,
        &cache.norm,
        &lp.ln1_gain,
        &mut grad.ln1_gain,
        &mut grad.ln1_bias,
    ))
}

/// Backpropagates `dlogits` (`[N x V]`, the loss gradient w.r.t. the logits
/// of [`super::forward_batch`]) through the cached forward graph.
pub fn backward(params: &ModelParams, cache: &ForwardCache, dlogits: &Matrix) -> Result<Gradients> {
    let cfg = &params.config;
    if dlogits.shape() != (cache.tokens.len(), cfg.vocab_size) {
        return Err(ModelError::Config(format!(
            "dlogits shape {:?} does not match forward output",
            dlogits.shape()
        )));
    }
    let mut grad = params.zeros_like();
    grad.unembedding = matmul_tn(&cache.final_xn, dlogits)?;
    let dxn = matmul_nt(dlogits, &params.unembedding)?;
    let mut dx = layer_norm_backward(
        &dxn,
        &cache.final_norm,
        &params.final_gain,
        &mut grad.final_gain,
        &mut grad.final_bias,
    );

    for l in (0..cfg.num_layers).rev() {
        let lp = &params.layers[l];
        let lg = &mut grad.layers[l];
        // x_l = x' + mlp(x'): the write's gradient is the stream gradient.
        let d_mid = mlp_backward(&dx, &cache.mlp[l], lp, lg)?;
        dx.add_assign(&d_mid);
        let d_in = attention_backward(&dx, &cache.attn[l], lp, cfg, &cache.segments, lg)?;
        dx.add_assign(&d_in);
    }

    for &(start, len) in &cache.segments {
        for pos in 0..len {
            let r = start + pos;
            let tok = cache.tokens[r] as usize;
            let g = dx.row(r);
            for (o, v) in grad.token_embedding.row_mut(tok).iter_mut().zip(g) {
                *o += v;
            }
            for (o, v) in grad.position_embedding.row_mut(pos).iter_mut().zip(g) {
                *o += v;
            }
        }
    }
    Ok(grad)
}
