//! Similarity and rank metrics applied per layer and checkpoint.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{center_columns, matmul_tn, singular_values, LinalgError, Matrix};
use crate::model::WriteKind;

/// Centered activations with a smaller Frobenius norm carry no signal.
const CKA_MIN_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("degenerate activations: centered Frobenius norm {norm:e} is below 1e-12")]
    DegenerateActivations { norm: f64 },
    #[error("effective rank is undefined for a zero matrix")]
    ZeroMatrix,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("empty series")]
    EmptySeries,
    #[error("at step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<MetricsError>,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    CkaToFinal,
    ParamPer,
    GradPer,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::CkaToFinal, MetricKind::ParamPer, MetricKind::GradPer];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::CkaToFinal => "cka_to_final",
            MetricKind::ParamPer => "param_per",
            MetricKind::GradPer => "grad_per",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

/// Normalizer for proportional effective rank.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerDenominator {
    /// `min(D, H)`, the largest attainable rank.
    #[default]
    MinDim,
    /// `H`, the hidden width of the branch.
    HiddenDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u64,
    /// `None` when the metric is undefined at this checkpoint.
    pub value: Option<f64>,
}

/// One metric trajectory for one layer and branch, ascending by step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub model_id: String,
    pub layer: usize,
    pub kind: WriteKind,
    pub metric: MetricKind,
    pub points: Vec<SeriesPoint>,
}

impl MetricSeries {
    pub fn steps(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.step).collect()
    }

    /// Value at the last checkpoint, if defined there.
    pub fn final_value(&self) -> Option<f64> {
        self.points.last().and_then(|p| p.value)
    }

    pub fn missing_count(&self) -> usize {
        self.points.iter().filter(|p| p.value.is_none()).count()
    }
}

/// Linear CKA, `‖X̄ᵀȲ‖²_F / (‖X̄ᵀX̄‖_F ‖ȲᵀȲ‖_F)`, with columns centered
/// internally. Rows of `x` and `y` must correspond (same tokens).
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(MetricsError::ShapeMismatch(x.shape(), y.shape()));
    }
    let xc = center_columns(x)?;
    let yc = center_columns(y)?;
    for m in [&xc, &yc] {
        let norm = m.frobenius_norm();
        if !(norm > CKA_MIN_NORM) {
            return Err(MetricsError::DegenerateActivations { norm });
        }
    }
    let cross = matmul_tn(&xc, &yc)?.frobenius_norm();
    let xx = matmul_tn(&xc, &xc)?.frobenius_norm();
    let yy = matmul_tn(&yc, &yc)?.frobenius_norm();
    Ok(cross * cross / (xx * yy))
}

/// `exp(H(p))` with `p_k = σ_k / ‖σ‖₁` and `0 ln 0 = 0`, in `[1, K]`.
pub fn effective_rank(m: &Matrix) -> Result<f64> {
    let spectrum = singular_values(m)?;
    let total = spectrum.l1_norm();
    if total == 0.0 {
        return Err(MetricsError::ZeroMatrix);
    }
    let entropy: f64 = spectrum
        .values()
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp().clamp(1.0, spectrum.len() as f64))
}

/// Effective rank of `θ` (`[D x H]`) over `min(D, H)`.
pub fn proportional_effective_rank(theta: &Matrix) -> Result<f64> {
    proportional_effective_rank_with(theta, PerDenominator::MinDim)
}

pub fn proportional_effective_rank_with(theta: &Matrix, denominator: PerDenominator) -> Result<f64> {
    let er = effective_rank(theta)?;
    let denom = match denominator {
        PerDenominator::MinDim => theta.rows().min(theta.cols()),
        PerDenominator::HiddenDim => theta.cols(),
    };
    Ok(er / denom as f64)
}

/// CKA of every checkpoint's activations against the last checkpoint's.
pub fn cka_to_final(
    model_id: &str,
    layer: usize,
    kind: WriteKind,
    activations: &[(u64, &Matrix)],
) -> Result<MetricSeries> {
    let (_, last) = activations.last().ok_or(MetricsError::EmptySeries)?;
    let points = activations
        .iter()
        .map(|&(step, a)| {
            if a.shape() != last.shape() {
                return Err(MetricsError::ShapeMismatch(a.shape(), last.shape()));
            }
            let value = linear_cka(a, last).map_err(|e| MetricsError::AtStep {
                step,
                source: Box::new(e),
            })?;
            Ok(SeriesPoint {
                step,
                value: Some(value),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricSeries {
        model_id: model_id.to_string(),
        layer,
        kind,
        metric: MetricKind::CkaToFinal,
        points,
    })
}

/// Proportional effective rank per checkpoint. A zero matrix yields a
/// missing point rather than a value.
pub fn per_series(
    model_id: &str,
    layer: usize,
    kind: WriteKind,
    metric: MetricKind,
    matrices: &[(u64, &Matrix)],
    denominator: PerDenominator,
) -> Result<MetricSeries> {
    let shape = matrices.first().ok_or(MetricsError::EmptySeries)?.1.shape();
    let points = matrices
        .iter()
        .map(|&(step, m)| {
            if m.shape() != shape {
                return Err(MetricsError::ShapeMismatch(m.shape(), shape));
            }
            let value = match proportional_effective_rank_with(m, denominator) {
                Ok(v) => Some(v),
                Err(MetricsError::ZeroMatrix) => None,
                Err(e) => {
                    return Err(MetricsError::AtStep {
                        step,
                        source: Box::new(e),
                    })
                }
            };
            Ok(SeriesPoint { step, value })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricSeries {
        model_id: model_id.to_string(),
        layer,
        kind,
        metric,
        points,
    })
}
