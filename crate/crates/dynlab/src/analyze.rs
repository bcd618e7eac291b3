//! Metric series and report files for one run directory.

use std::fs;
use std::path::{Path, PathBuf};

use dynlab_core::analysis::{
    correlation_report, layer_flags, mean_across_layers, percentile_bands, AnalysisError,
    CorrelationReport, LayerFlags, BAND_PERCENTILES,
};
use dynlab_core::linalg::Matrix;
use dynlab_core::metrics::{cka_to_final, per_series, MetricKind, MetricSeries};
use dynlab_core::model::WriteKind;
use dynlab_core::store::{RunReader, StoreError, MANIFEST_DIGEST_FILE};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::report::{fmt_f64, fmt_opt, CsvOut};
use crate::train::store_error;

pub const ANALYSIS_DIR: &str = "analysis";
pub const SERIES_FILE: &str = "series.csv";
pub const BANDS_FILE: &str = "bands.csv";
pub const MEANS_FILE: &str = "means.csv";
pub const FLAGS_FILE: &str = "flags.csv";
pub const MCC_FILE: &str = "mcc.csv";
pub const MCC_DETAIL_FILE: &str = "mcc_detail.csv";
pub const METADATA_FILE: &str = "metadata.json";

const METRICS: [MetricKind; 3] = [MetricKind::CkaToFinal, MetricKind::ParamPer, MetricKind::GradPer];

/// The three series of one (layer, kind).
struct LayerSeries {
    cka: MetricSeries,
    param: MetricSeries,
    grad: MetricSeries,
}

impl LayerSeries {
    fn get(&self, metric: MetricKind) -> &MetricSeries {
        match metric {
            MetricKind::CkaToFinal => &self.cka,
            MetricKind::ParamPer => &self.param,
            MetricKind::GradPer => &self.grad,
        }
    }
}

/// Write matrices and their gradients at one checkpoint, indexed
/// `[layer][kind]`.
type StepMatrices = Vec<[(Matrix, Matrix); 2]>;

#[derive(Serialize)]
struct Metadata<'a> {
    model_id: &'a str,
    manifest_fnv1a64: String,
    total_steps: u64,
    checkpoints: &'a [u64],
    num_layers: usize,
    kinds: [WriteKind; 2],
    metrics: [MetricKind; 3],
    per_denominator: dynlab_core::metrics::PerDenominator,
    thresholds: dynlab_core::analysis::Thresholds,
    band_percentiles: [f64; 5],
    percentile_method: &'static str,
    fraction_axis: &'static str,
    series_rows: usize,
    missing_points: usize,
    files: [&'static str; 6],
}

fn kind_index(kind: WriteKind) -> usize {
    match kind {
        WriteKind::Att => 0,
        WriteKind::Mlp => 1,
    }
}

fn fraction(step: u64, total: u64) -> f64 {
    if total == 0 {
        1.0
    } else {
        step as f64 / total as f64
    }
}

fn analysis_error(e: AnalysisError) -> CliError {
    match e {
        AnalysisError::NoCheckpointInHorizon { .. } => CliError::usage(format!(
            "{e}; add earlier checkpoints or raise metrics.thresholds.horizon_fraction"
        )),
        other => CliError::runtime(other.to_string()),
    }
}

fn open_run(run_dir: &Path) -> Result<RunReader> {
    match RunReader::open(run_dir) {
        Ok(r) => Ok(r),
        Err(StoreError::NotFound(_)) => Err(CliError::usage(format!(
            "{} is not a run directory (no manifest)",
            run_dir.display()
        ))),
        Err(e) => Err(store_error(e)),
    }
}

/// Computes every series for the run and writes the report files into
/// `<run_dir>/analysis`, which is returned. `jobs` bounds the worker pool.
pub fn cmd_analyze(run_dir: &Path, jobs: Option<usize>) -> Result<PathBuf> {
    let reader = open_run(run_dir)?;
    let manifest = reader.manifest();
    let present: Vec<u64> = manifest.checkpoints.iter().map(|c| c.step).collect();
    let missing: Vec<u64> = manifest
        .schedule
        .iter()
        .copied()
        .filter(|s| !present.contains(s))
        .collect();
    if !manifest.finalized || !missing.is_empty() {
        return Err(CliError::runtime(format!(
            "incomplete run {}: missing checkpoints at steps {missing:?}; analysis needs the full schedule",
            run_dir.display()
        )));
    }
    let steps = manifest.schedule.clone();
    let layers = manifest.model_config.num_layers;
    let model_id = manifest.model_id.clone();
    let settings = manifest.analysis;
    let total = manifest.train_config.total_steps;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::runtime(format!("cannot start worker pool: {e}")))?;

    let series: Vec<LayerSeries> = pool.install(|| -> Result<Vec<LayerSeries>> {
        let per_step: Vec<StepMatrices> = steps
            .par_iter()
            .map(|&step| -> Result<StepMatrices> {
                let params = reader.load_params(step).map_err(store_error)?;
                let grads = reader.load_write_gradients(step).map_err(store_error)?;
                (0..layers)
                    .map(|l| {
                        let pair = |k: WriteKind| -> Result<(Matrix, Matrix)> {
                            let theta = params
                                .write_matrix(l, k)
                                .map_err(|e| CliError::runtime(e.to_string()))?;
                            Ok((theta, grads[l].get(k).clone()))
                        };
                        Ok([pair(WriteKind::Att)?, pair(WriteKind::Mlp)?])
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;

        let jobs: Vec<(usize, WriteKind)> = (0..layers)
            .flat_map(|l| WriteKind::ALL.map(|k| (l, k)))
            .collect();
        jobs.par_iter()
            .map(|&(layer, kind)| -> Result<LayerSeries> {
                let acts: Vec<Matrix> = steps
                    .iter()
                    .map(|&s| reader.load_activations(s, layer, kind).map_err(store_error))
                    .collect::<Result<_>>()?;
                let pairs = |which: usize| -> Vec<(u64, &Matrix)> {
                    steps
                        .iter()
                        .zip(&per_step)
                        .map(|(&s, m)| {
                            let (theta, grad) = &m[layer][kind_index(kind)];
                            (s, if which == 0 { theta } else { grad })
                        })
                        .collect()
                };
                let act_pairs: Vec<(u64, &Matrix)> = steps.iter().copied().zip(&acts).collect();
                let context = |e: dynlab_core::metrics::MetricsError| {
                    CliError::runtime(format!("layer {layer} {kind}: {e}"))
                };
                Ok(LayerSeries {
                    cka: cka_to_final(&model_id, layer, kind, &act_pairs).map_err(context)?,
                    param: per_series(
                        &model_id,
                        layer,
                        kind,
                        MetricKind::ParamPer,
                        &pairs(0),
                        settings.per_denominator,
                    )
                    .map_err(context)?,
                    grad: per_series(
                        &model_id,
                        layer,
                        kind,
                        MetricKind::GradPer,
                        &pairs(1),
                        settings.per_denominator,
                    )
                    .map_err(context)?,
                })
            })
            .collect()
    })?;

    // Regroup by kind, layers ascending.
    let by_kind = |kind: WriteKind, metric: MetricKind| -> Vec<MetricSeries> {
        series
            .iter()
            .filter(|s| s.cka.kind == kind)
            .map(|s| s.get(metric).clone())
            .collect()
    };

    let mut flags: Vec<LayerFlags> = Vec::new();
    for kind in WriteKind::ALL {
        flags.extend(
            layer_flags(
                &by_kind(kind, MetricKind::CkaToFinal),
                &by_kind(kind, MetricKind::ParamPer),
                &by_kind(kind, MetricKind::GradPer),
                total,
                &settings.thresholds,
            )
            .map_err(analysis_error)?,
        );
    }
    let report = correlation_report(&model_id, &flags).map_err(analysis_error)?;

    let out = run_dir.join(ANALYSIS_DIR);
    fs::create_dir_all(&out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;

    // series.csv
    let mut csv = CsvOut::create(&out.join(SERIES_FILE), &["step", "layer", "kind", "metric", "value", "missing_flag"])?;
    let mut rows = 0usize;
    let mut missing_points = 0usize;
    for (i, &step) in steps.iter().enumerate() {
        for layer in 0..layers {
            for kind in WriteKind::ALL {
                let s = &series[layer * 2 + kind_index(kind)];
                for metric in METRICS {
                    let value = s.get(metric).points[i].value;
                    missing_points += value.is_none() as usize;
                    rows += 1;
                    csv.row([
                        step.to_string(),
                        layer.to_string(),
                        kind.to_string(),
                        metric.as_str().to_string(),
                        fmt_opt(value),
                        (value.is_none() as u8).to_string(),
                    ])?;
                }
            }
        }
    }
    csv.finish()?;

    // bands.csv and means.csv
    let mut header = vec!["model", "kind", "metric", "step", "fraction"];
    let band_names: Vec<String> = BAND_PERCENTILES.iter().map(|p| format!("p{p}")).collect();
    header.extend(band_names.iter().map(String::as_str));
    header.push("missing_flag");
    let mut bands_csv = CsvOut::create(&out.join(BANDS_FILE), &header)?;
    let mut means_csv = CsvOut::create(
        &out.join(MEANS_FILE),
        &["model", "kind", "metric", "step", "fraction", "mean", "missing_flag"],
    )?;
    for kind in WriteKind::ALL {
        for metric in METRICS {
            let group = by_kind(kind, metric);
            let bands = percentile_bands(&group).map_err(analysis_error)?;
            let means = mean_across_layers(&group).map_err(analysis_error)?;
            for (band, mean) in bands.iter().zip(&means.points) {
                let lead = [
                    model_id.clone(),
                    kind.to_string(),
                    metric.as_str().to_string(),
                    band.step.to_string(),
                    fmt_f64(fraction(band.step, total)),
                ];
                let mut row: Vec<String> = lead.to_vec();
                match band.values {
                    Some(v) => row.extend(v.iter().map(|&x| fmt_f64(x))),
                    None => row.extend(std::iter::repeat_n(String::new(), 5)),
                }
                row.push((band.values.is_none() as u8).to_string());
                bands_csv.row(row)?;
                let mut row: Vec<String> = lead.to_vec();
                row.push(fmt_opt(mean.value));
                row.push((mean.value.is_none() as u8).to_string());
                means_csv.row(row)?;
            }
        }
    }
    bands_csv.finish()?;
    means_csv.finish()?;

    // flags.csv
    let mut flags_csv = CsvOut::create(
        &out.join(FLAGS_FILE),
        &["model", "layer", "kind", "early_convergence", "stable_param_per", "stable_grad_per"],
    )?;
    for f in &flags {
        flags_csv.row([
            model_id.clone(),
            f.layer.to_string(),
            f.kind.to_string(),
            (f.early_convergence as u8).to_string(),
            (f.stable_param_per as u8).to_string(),
            (f.stable_grad_per as u8).to_string(),
        ])?;
    }
    flags_csv.finish()?;

    write_mcc(&out, &report)?;

    let digest = fs::read_to_string(run_dir.join(MANIFEST_DIGEST_FILE))
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    let meta = Metadata {
        model_id: &model_id,
        manifest_fnv1a64: digest,
        total_steps: total,
        checkpoints: &steps,
        num_layers: layers,
        kinds: WriteKind::ALL,
        metrics: METRICS,
        per_denominator: settings.per_denominator,
        thresholds: settings.thresholds,
        band_percentiles: BAND_PERCENTILES,
        percentile_method: "linear interpolation between closest ranks, rank = q/100 * (n - 1)",
        fraction_axis: "step / total_steps",
        series_rows: rows,
        missing_points,
        files: [SERIES_FILE, BANDS_FILE, MEANS_FILE, FLAGS_FILE, MCC_FILE, MCC_DETAIL_FILE],
    };
    let mut json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    json.push('\n');
    let path = out.join(METADATA_FILE);
    fs::write(&path, json).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(out)
}

fn write_mcc(out: &Path, report: &CorrelationReport) -> Result<()> {
    // Entries come ordered θ_att, ∇θ_att, θ_mlp, ∇θ_mlp.
    let mut table = CsvOut::create(
        &out.join(MCC_FILE),
        &["model", "theta_att", "grad_theta_att", "theta_mlp", "grad_theta_mlp"],
    )?;
    let mut row = vec![report.model_id.clone()];
    row.extend(report.entries.iter().map(|e| fmt_f64(e.mcc.value)));
    table.row(row)?;
    table.finish()?;

    let mut detail = CsvOut::create(
        &out.join(MCC_DETAIL_FILE),
        &["model", "kind", "target", "mcc", "degenerate", "tp", "fp", "fn", "tn"],
    )?;
    for e in &report.entries {
        let target = match e.target {
            dynlab_core::analysis::FlagTarget::Params => "params",
            dynlab_core::analysis::FlagTarget::Grads => "grads",
        };
        let c = e.mcc.counts;
        detail.row([
            report.model_id.clone(),
            e.kind.to_string(),
            target.to_string(),
            fmt_f64(e.mcc.value),
            (e.mcc.degenerate as u8).to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.tn.to_string(),
        ])?;
    }
    detail.finish()
}
