//! Aggregation of metric series across layers, per-layer convergence and
//! rank-stability flags, and Matthews correlation between them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{MetricKind, MetricSeries, SeriesPoint};
use crate::model::WriteKind;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("no series to aggregate")]
    NoSeries,
    #[error("series for layer {layer} does not share the step grid of layer {reference}")]
    MisalignedSteps { layer: usize, reference: usize },
    #[error("series is empty")]
    EmptySeries,
    #[error("no checkpoint at or before step {horizon} (schedule too sparse for the convergence horizon)")]
    NoCheckpointInHorizon { horizon: f64 },
    #[error("no final values to set a threshold from")]
    NoFinals,
    #[error("flag vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Percentiles reported per checkpoint.
pub const BAND_PERCENTILES: [f64; 5] = [10.0, 25.0, 50.0, 75.0, 90.0];

/// Heuristic thresholds for the per-layer flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Minimum CKA for early convergence.
    pub cka: f64,
    /// Fraction of training steps within which CKA must reach `cka`.
    pub horizon_fraction: f64,
    /// Minimum final parameter PER.
    pub param_per: f64,
    /// Gradient PER threshold as a fraction of the largest final value.
    pub grad_per_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            cka: 0.45,
            horizon_fraction: 0.10,
            param_per: 0.95,
            grad_per_fraction: 0.90,
        }
    }
}

/// Linear interpolation between closest ranks on sorted data:
/// rank `q/100 * (n - 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn check_grid(series: &[MetricSeries]) -> Result<Vec<u64>> {
    let first = series.first().ok_or(AnalysisError::NoSeries)?;
    let steps = first.steps();
    for s in &series[1..] {
        if s.points.len() != steps.len() || s.points.iter().zip(&steps).any(|(p, &t)| p.step != t) {
            return Err(AnalysisError::MisalignedSteps {
                layer: s.layer,
                reference: first.layer,
            });
        }
    }
    Ok(steps)
}

/// Defined values across layers at point index `i`, sorted.
fn column(series: &[MetricSeries], i: usize) -> Vec<f64> {
    let mut v: Vec<f64> = series.iter().filter_map(|s| s.points[i].value).collect();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileBand {
    pub step: u64,
    /// p10, p25, p50, p75, p90; `None` if no layer has a value at this step.
    pub values: Option<[f64; 5]>,
}

/// Percentiles across layers at every checkpoint.
pub fn percentile_bands(series: &[MetricSeries]) -> Result<Vec<PercentileBand>> {
    let steps = check_grid(series)?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(i, &step)| {
            let col = column(series, i);
            let values = (!col.is_empty()).then(|| BAND_PERCENTILES.map(|q| percentile(&col, q)));
            PercentileBand { step, values }
        })
        .collect())
}

/// A series averaged across layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeanSeries {
    pub model_id: String,
    pub kind: WriteKind,
    pub metric: MetricKind,
    pub points: Vec<SeriesPoint>,
}

/// Arithmetic mean across layers per checkpoint, over the layers that have a
/// value there.
pub fn mean_across_layers(series: &[MetricSeries]) -> Result<LayerMeanSeries> {
    let steps = check_grid(series)?;
    let first = &series[0];
    let points = steps
        .iter()
        .enumerate()
        .map(|(i, &step)| {
            let col = column(series, i);
            let value = (!col.is_empty()).then(|| col.iter().sum::<f64>() / col.len() as f64);
            SeriesPoint { step, value }
        })
        .collect();
    Ok(LayerMeanSeries {
        model_id: first.model_id.clone(),
        kind: first.kind,
        metric: first.metric,
        points,
    })
}

/// True iff some checkpoint with `step <= horizon_fraction * total_steps`
/// has CKA `>= threshold`.
pub fn early_convergence_flag(
    cka: &MetricSeries,
    total_steps: u64,
    threshold: f64,
    horizon_fraction: f64,
) -> Result<bool> {
    if cka.points.is_empty() {
        return Err(AnalysisError::EmptySeries);
    }
    let horizon = horizon_fraction * total_steps as f64;
    let mut within = cka.points.iter().filter(|p| p.step as f64 <= horizon).peekable();
    if within.peek().is_none() {
        return Err(AnalysisError::NoCheckpointInHorizon { horizon });
    }
    Ok(within.any(|p| p.value.is_some_and(|v| v >= threshold)))
}

/// True iff the final PER is at least `threshold`. A missing final value
/// counts as not stable.
pub fn stable_param_per_flag(per: &MetricSeries, threshold: f64) -> Result<bool> {
    if per.points.is_empty() {
        return Err(AnalysisError::EmptySeries);
    }
    Ok(per.final_value().is_some_and(|v| v >= threshold))
}

/// True iff the final gradient PER is at least `fraction` of the largest
/// final value among `all_layer_finals`.
pub fn stable_grad_per_flag(per: &MetricSeries, all_layer_finals: &[f64], fraction: f64) -> Result<bool> {
    if per.points.is_empty() {
        return Err(AnalysisError::EmptySeries);
    }
    let max = all_layer_finals
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(AnalysisError::NoFinals)?;
    Ok(per.final_value().is_some_and(|v| v >= fraction * max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Contingency {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Contingency {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mcc {
    pub value: f64,
    /// A marginal of the contingency table is zero; `value` is then 0.
    pub degenerate: bool,
    pub counts: Contingency,
}

/// Matthews correlation between two boolean vectors, `a` as the reference
/// and `b` as the prediction.
pub fn mcc(a: &[bool], b: &[bool]) -> Result<Mcc> {
    if a.len() != b.len() {
        return Err(AnalysisError::LengthMismatch(a.len(), b.len()));
    }
    let mut c = Contingency::default();
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return Ok(Mcc {
            value: 0.0,
            degenerate: true,
            counts: c,
        });
    }
    Ok(Mcc {
        value: (tp * tn - fp * fn_) / denom.sqrt(),
        degenerate: false,
        counts: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlags {
    pub layer: usize,
    pub kind: WriteKind,
    pub early_convergence: bool,
    pub stable_param_per: bool,
    pub stable_grad_per: bool,
}

/// Flags for every layer of one branch kind. The three slices are indexed
/// by layer.
pub fn layer_flags(
    cka: &[MetricSeries],
    param_per: &[MetricSeries],
    grad_per: &[MetricSeries],
    total_steps: u64,
    thresholds: &Thresholds,
) -> Result<Vec<LayerFlags>> {
    if cka.len() != param_per.len() || cka.len() != grad_per.len() {
        return Err(AnalysisError::LengthMismatch(cka.len(), param_per.len().max(grad_per.len())));
    }
    let grad_finals: Vec<f64> = grad_per.iter().filter_map(MetricSeries::final_value).collect();
    cka.iter()
        .zip(param_per)
        .zip(grad_per)
        .map(|((c, p), g)| {
            let stable_grad_per = if grad_finals.is_empty() {
                false
            } else {
                stable_grad_per_flag(g, &grad_finals, thresholds.grad_per_fraction)?
            };
            Ok(LayerFlags {
                layer: c.layer,
                kind: c.kind,
                early_convergence: early_convergence_flag(
                    c,
                    total_steps,
                    thresholds.cka,
                    thresholds.horizon_fraction,
                )?,
                stable_param_per: stable_param_per_flag(p, thresholds.param_per)?,
                stable_grad_per,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlagTarget {
    Params,
    Grads,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub kind: WriteKind,
    pub target: FlagTarget,
    pub mcc: Mcc,
}

/// MCC between early convergence and PER stability, per branch kind,
/// ordered `θ_att, ∇θ_att, θ_mlp, ∇θ_mlp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub model_id: String,
    pub entries: Vec<CorrelationEntry>,
}

pub fn correlation_report(model_id: &str, flags: &[LayerFlags]) -> Result<CorrelationReport> {
    let mut entries = Vec::with_capacity(4);
    for kind in WriteKind::ALL {
        let of_kind: Vec<&LayerFlags> = flags.iter().filter(|f| f.kind == kind).collect();
        let early: Vec<bool> = of_kind.iter().map(|f| f.early_convergence).collect();
        for target in [FlagTarget::Params, FlagTarget::Grads] {
            let stable: Vec<bool> = of_kind
                .iter()
                .map(|f| match target {
                    FlagTarget::Params => f.stable_param_per,
                    FlagTarget::Grads => f.stable_grad_per,
                })
                .collect();
            entries.push(CorrelationEntry {
                kind,
                target,
                mcc: mcc(&early, &stable)?,
            });
        }
    }
    Ok(CorrelationReport {
        model_id: model_id.to_string(),
        entries,
    })
}
