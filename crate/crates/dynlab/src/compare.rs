//! Cross-run comparison on a normalized training-fraction axis.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dynlab_core::metrics::MetricKind;
use dynlab_core::model::WriteKind;
use serde::Serialize;

use crate::analyze::{ANALYSIS_DIR, MEANS_FILE, METADATA_FILE};
use crate::error::{CliError, Result};
use crate::report::{fmt_f64, fmt_opt, read_csv, CsvOut};

pub const ALIGNED_FILE: &str = "aligned.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Point of training at which convergence speed is compared.
pub const TARGET_FRACTION: f64 = 0.2;

const METRICS: [MetricKind; 3] = [MetricKind::CkaToFinal, MetricKind::ParamPer, MetricKind::GradPer];

struct RunMeans {
    label: String,
    model_dim: usize,
    num_layers: usize,
    total_steps: u64,
    steps: Vec<u64>,
    /// Layer means keyed by (kind, metric), aligned with `steps`.
    means: BTreeMap<(WriteKind, MetricKind), Vec<Option<f64>>>,
}

impl RunMeans {
    fn fraction(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            1.0
        } else {
            step as f64 / self.total_steps as f64
        }
    }

    /// Index of the checkpoint nearest to `f`; ties go to the earlier one.
    fn nearest(&self, f: f64) -> usize {
        let mut best = 0;
        for i in 1..self.steps.len() {
            if (self.fraction(self.steps[i]) - f).abs() < (self.fraction(self.steps[best]) - f).abs() {
                best = i;
            }
        }
        best
    }

    fn value(&self, kind: WriteKind, metric: MetricKind, i: usize) -> Option<f64> {
        self.means.get(&(kind, metric)).and_then(|v| v[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub model: String,
    pub model_dim: usize,
    pub num_layers: usize,
    pub total_steps: u64,
    pub step: u64,
    pub fraction: f64,
    pub cka_att: Option<f64>,
    pub cka_mlp: Option<f64>,
    /// Mean of the attention and MLP layer means.
    pub cka_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub target_fraction: f64,
    pub models: Vec<ModelSummary>,
    /// Whether every wider model has a strictly higher `cka_mean` than every
    /// narrower one. `None` when all widths are equal or a value is missing.
    pub wider_converges_faster: Option<bool>,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

fn load_run(dir: &Path) -> Result<RunMeans> {
    let manifest = dynlab_core::store::read_manifest(dir).map_err(|e| match e {
        dynlab_core::store::StoreError::NotFound(_) => {
            CliError::usage(format!("{} is not a run directory (no manifest)", dir.display()))
        }
        other => CliError::runtime(other.to_string()),
    })?;
    let analysis = dir.join(ANALYSIS_DIR);
    if !analysis.join(MEANS_FILE).is_file() || !analysis.join(METADATA_FILE).is_file() {
        return Err(CliError::usage(format!(
            "{} has not been analyzed; run `dynlab analyze {}` first",
            dir.display(),
            dir.display()
        )));
    }
    let (header, rows) = read_csv(&analysis.join(MEANS_FILE))?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::runtime(format!("{MEANS_FILE}: missing column {name}")))
    };
    let (kind_c, metric_c, step_c, mean_c) = (col("kind")?, col("metric")?, col("step")?, col("mean")?);
    let bad = |what: &str, v: &str| CliError::runtime(format!("{MEANS_FILE}: bad {what} {v:?}"));
    let steps = manifest.schedule.clone();
    let mut means: BTreeMap<(WriteKind, MetricKind), Vec<Option<f64>>> = BTreeMap::new();
    for row in &rows {
        let kind: WriteKind = row[kind_c].parse().map_err(|_| bad("kind", &row[kind_c]))?;
        let metric: MetricKind = row[metric_c].parse().map_err(|_| bad("metric", &row[metric_c]))?;
        let step: u64 = row[step_c].parse().map_err(|_| bad("step", &row[step_c]))?;
        let value = match row[mean_c].as_str() {
            "" => None,
            v => Some(v.parse::<f64>().map_err(|_| bad("mean", v))?),
        };
        let i = steps
            .binary_search(&step)
            .map_err(|_| bad("step (not in schedule)", &row[step_c]))?;
        means.entry((kind, metric)).or_insert_with(|| vec![None; steps.len()])[i] = value;
    }
    Ok(RunMeans {
        label: manifest.model_id.clone(),
        model_dim: manifest.model_config.model_dim,
        num_layers: manifest.model_config.num_layers,
        total_steps: manifest.train_config.total_steps,
        steps,
        means,
    })
}

fn wider_converges_faster(models: &[ModelSummary]) -> Option<bool> {
    let mut any_pair = false;
    for a in models {
        for b in models {
            if a.model_dim < b.model_dim {
                any_pair = true;
                if b.cka_mean? <= a.cka_mean? {
                    return Some(false);
                }
            }
        }
    }
    any_pair.then_some(true)
}

/// Writes the aligned trajectories and the convergence summary into `out`.
pub fn cmd_compare(run_dirs: &[PathBuf], out: &Path) -> Result<CompareReport> {
    if run_dirs.len() < 2 {
        return Err(CliError::usage("compare needs at least two run directories"));
    }
    let mut runs: Vec<RunMeans> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_>>()?;
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for r in &mut runs {
        let n = seen.entry(r.label.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            r.label = format!("{}#{n}", r.label);
        }
    }

    fs::create_dir_all(out).map_err(|e| CliError::runtime(format!("{}: {e}", out.display())))?;

    let mut grid: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.steps.iter().map(|&s| r.fraction(s)))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut header = vec!["fraction".to_string()];
    for r in &runs {
        header.push(format!("{}/step", r.label));
        for kind in WriteKind::ALL {
            for metric in METRICS {
                header.push(format!("{}/{kind}/{}", r.label, metric.as_str()));
            }
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut aligned = CsvOut::create(&out.join(ALIGNED_FILE), &header_refs)?;
    for &f in &grid {
        let mut row = vec![fmt_f64(f)];
        for r in &runs {
            let i = r.nearest(f);
            row.push(r.steps[i].to_string());
            for kind in WriteKind::ALL {
                for metric in METRICS {
                    row.push(fmt_opt(r.value(kind, metric, i)));
                }
            }
        }
        aligned.row(row)?;
    }
    aligned.finish()?;

    let models: Vec<ModelSummary> = runs
        .iter()
        .map(|r| {
            let i = r.nearest(TARGET_FRACTION);
            let att = r.value(WriteKind::Att, MetricKind::CkaToFinal, i);
            let mlp = r.value(WriteKind::Mlp, MetricKind::CkaToFinal, i);
            ModelSummary {
                model: r.label.clone(),
                model_dim: r.model_dim,
                num_layers: r.num_layers,
                total_steps: r.total_steps,
                step: r.steps[i],
                fraction: r.fraction(r.steps[i]),
                cka_att: att,
                cka_mlp: mlp,
                cka_mean: att.zip(mlp).map(|(a, m)| (a + m) / 2.0),
            }
        })
        .collect();

    let mut summary = CsvOut::create(
        &out.join(SUMMARY_FILE),
        &[
            "model", "model_dim", "num_layers", "total_steps", "target_fraction", "step", "fraction",
            "cka_att", "cka_mlp", "cka_mean",
        ],
    )?;
    for m in &models {
        summary.row([
            m.model.clone(),
            m.model_dim.to_string(),
            m.num_layers.to_string(),
            m.total_steps.to_string(),
            fmt_f64(TARGET_FRACTION),
            m.step.to_string(),
            fmt_f64(m.fraction),
            fmt_opt(m.cka_att),
            fmt_opt(m.cka_mlp),
            fmt_opt(m.cka_mean),
        ])?;
    }
    summary.finish()?;

    let report = CompareReport {
        target_fraction: TARGET_FRACTION,
        wider_converges_faster: wider_converges_faster(&models),
        models,
        out_dir: out.to_path_buf(),
    };
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    let path = out.join(SUMMARY_JSON);
    fs::write(&path, json).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(dim: usize, cka: Option<f64>) -> ModelSummary {
        ModelSummary {
            model: format!("d{dim}"),
            model_dim: dim,
            num_layers: 2,
            total_steps: 10,
            step: 2,
            fraction: 0.2,
            cka_att: cka,
            cka_mlp: cka,
            cka_mean: cka,
        }
    }

    #[test]
    fn width_ordering_flag() {
        assert_eq!(wider_converges_faster(&[summary(32, Some(0.4)), summary(128, Some(0.6))]), Some(true));
        assert_eq!(wider_converges_faster(&[summary(32, Some(0.6)), summary(128, Some(0.4))]), Some(false));
        assert_eq!(wider_converges_faster(&[summary(32, Some(0.5)), summary(32, Some(0.4))]), None);
        assert_eq!(wider_converges_faster(&[summary(32, None), summary(64, Some(0.4))]), None);
    }

    #[test]
    fn nearest_checkpoint_prefers_earlier_on_ties() {
        let run = RunMeans {
            label: "m".into(),
            model_dim: 8,
            num_layers: 1,
            total_steps: 8,
            steps: vec![0, 1, 3, 8],
            means: BTreeMap::new(),
        };
        assert_eq!(run.nearest(0.25), 1);
        assert_eq!(run.nearest(0.3), 2);
        assert_eq!(run.nearest(1.0), 3);
        assert_eq!(run.nearest(0.0), 0);
    }
}
