//! `report.json`, CSV tables and one plot per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::experiments::{
    AttemptPolicy, AttemptsTable, Comparison, DeviationCurve, EvalConfig, HeldoutEval, Robustness,
};
use crate::evaluation::metrics::MetricReport;
use crate::evaluation::plot::{save_line_plot, LinePlot, Series};

pub const REPORT_SCHEMA: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum Experiment {
    Compare(Comparison),
    Deviation(DeviationCurve),
    Robustness(Robustness),
    Attempts(AttemptsTable),
    Heldout(HeldoutEval),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Compare(_) => "compare",
            Experiment::Deviation(_) => "deviation",
            Experiment::Robustness(_) => "robustness",
            Experiment::Attempts(_) => "attempts",
            Experiment::Heldout(_) => "heldout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema_version: u32,
    /// Build identifier of the binary that produced the report.
    pub build: String,
    pub config: EvalConfig,
    /// Sequence and model provenance supplied by the caller.
    #[serde(default)]
    pub inputs: serde_json::Value,
    pub elapsed_s: f64,
    pub experiments: Vec<Experiment>,
}

impl Report {
    pub fn new(build: impl Into<String>, config: EvalConfig, inputs: serde_json::Value) -> Self {
        Self {
            schema_version: REPORT_SCHEMA,
            build: build.into(),
            config,
            inputs,
            elapsed_s: 0.0,
            experiments: Vec::new(),
        }
    }
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let version = raw.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(REPORT_SCHEMA as u64) {
        return Err(Error::Report(format!("unsupported report schema {version:?}")));
    }
    Ok(serde_json::from_value(raw)?)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Report(format!("{}: {e}", path.display()))
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(&r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn metric_cells(r: &MetricReport) -> Vec<String> {
    vec![f(r.success_auc), f(r.precision), f(r.norm_precision), f(r.mean_iou), r.frames.to_string()]
}

const METRIC_HEADER: [&str; 5] = ["success_auc", "precision", "norm_precision", "mean_iou", "frames"];

fn header(prefix: &[&'static str]) -> Vec<&'static str> {
    prefix.iter().copied().chain(METRIC_HEADER).collect()
}

fn policy_name(p: &AttemptPolicy) -> String {
    match p {
        AttemptPolicy::Once => "once".into(),
        AttemptPolicy::Multiple { max_attempts, accept_iou } => format!("multiple({max_attempts},{accept_iou})"),
    }
}

fn success_plot<'a>(title: &'a str, curves: Vec<(String, &MetricReport)>) -> LinePlot<'a> {
    LinePlot {
        title,
        x_label: "overlap threshold",
        y_label: "success rate",
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        series: curves
            .into_iter()
            .map(|(label, r)| Series {
                label: format!("{label} [{:.3}]", r.success_auc),
                points: r.success_curve.clone(),
            })
            .collect(),
    }
}

fn emit_experiment(e: &Experiment, dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let name = e.name();
    let csv_path = dir.join(format!("{name}.csv"));
    let png_path = dir.join(format!("{name}.png"));
    match e {
        Experiment::Compare(c) => {
            let rows = c
                .rows
                .iter()
                .map(|r| {
                    let mut v = vec![r.method.name().to_string(), f(r.init_iou), r.refine_failures.to_string()];
                    v.extend(metric_cells(&r.report));
                    v
                })
                .collect();
            write_csv(&csv_path, &header(&["method", "init_iou", "refine_failures"]), rows)?;
            let curves = c.rows.iter().map(|r| (r.method.name().to_string(), &r.report)).collect();
            save_line_plot(&success_plot("Success by initialization", curves), &png_path)?;
        }
        Experiment::Deviation(d) => {
            let rows = d
                .points
                .iter()
                .map(|p| {
                    let mut v = vec![f(p.rate), p.samples.to_string(), f(p.init_iou)];
                    v.extend(metric_cells(&p.report));
                    v
                })
                .collect();
            write_csv(&csv_path, &header(&["rate", "samples", "init_iou"]), rows)?;
            let top = d.points.last().map_or(0.3, |p| p.rate).max(0.05);
            let plot = LinePlot {
                title: "Success AUC by deviation rate",
                x_label: "deviation rate",
                y_label: "success AUC",
                x_range: (0.0, top * 1.05),
                y_range: (0.0, 1.0),
                series: vec![
                    Series {
                        label: "success AUC".into(),
                        points: d.points.iter().map(|p| (p.rate, p.success_auc)).collect(),
                    },
                    Series {
                        label: "precision".into(),
                        points: d.points.iter().map(|p| (p.rate, p.precision)).collect(),
                    },
                ],
            };
            save_line_plot(&plot, &png_path)?;
        }
        Experiment::Robustness(r) => {
            let mut rows: Vec<Vec<String>> = r
                .draws
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let mut v = vec![(i + 1).to_string(), d.seed.to_string()];
                    v.extend(metric_cells(&d.report));
                    v
                })
                .collect();
            for (label, s) in [("mean", &r.mean), ("std", &r.std)] {
                rows.push(vec![
                    label.into(),
                    String::new(),
                    f(s.success_auc),
                    f(s.precision),
                    f(s.norm_precision),
                    String::new(),
                    String::new(),
                ]);
            }
            write_csv(&csv_path, &header(&["draw", "seed"]), rows)?;
            let curves = r
                .draws
                .iter()
                .enumerate()
                .map(|(i, d)| (format!("draw {}", i + 1), &d.report))
                .collect();
            save_line_plot(&success_plot("Success across click draws", curves), &png_path)?;
        }
        Experiment::Attempts(a) => {
            let rows = a
                .rows
                .iter()
                .map(|r| {
                    let mut v = vec![
                        serde_json::to_value(r.input)?.as_str().unwrap_or_default().to_string(),
                        policy_name(&r.policy),
                        f(r.mean_attempts),
                        f(r.init_iou),
                    ];
                    v.extend(metric_cells(&r.report));
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?;
            write_csv(&csv_path, &header(&["input", "policy", "mean_attempts", "init_iou"]), rows)?;
            let curves = a
                .rows
                .iter()
                .map(|r| (format!("{:?} {}", r.input, policy_name(&r.policy)), &r.report))
                .collect();
            save_line_plot(&success_plot("Success by interaction policy", curves), &png_path)?;
        }
        Experiment::Heldout(h) => {
            let mut rows: Vec<Vec<String>> = h
                .rows
                .iter()
                .map(|r| vec!["refiner".into(), r.method.name().into(), f(r.mean_iou), r.samples.to_string()])
                .collect();
            rows.push(vec!["nested".into(), "learnable".into(), f(h.nested.learnable_iou), h.nested.pairs.to_string()]);
            rows.push(vec!["nested".into(), "category".into(), f(h.nested.category_iou), h.nested.pairs.to_string()]);
            for c in &h.cascade {
                rows.push(vec!["cascade".into(), format!("stages={}", c.stages), f(c.mean_iou), String::new()]);
            }
            rows.push(vec!["cascade".into(), "monotone_fraction".into(), f(h.monotone_fraction), String::new()]);
            rows.push(vec!["cascade".into(), "monotone_fraction_deepest".into(), f(h.monotone_fraction_deepest), String::new()]);
            write_csv(&csv_path, &["table", "row", "value", "samples"], rows)?;
            let top = h.cascade.iter().map(|c| c.stages).max().unwrap_or(1).max(1) as f64;
            let plot = LinePlot {
                title: "Mean IoU by cascade depth",
                x_label: "refinement stages",
                y_label: "mean IoU",
                x_range: (-0.2, top + 0.2),
                y_range: (0.0, 1.0),
                series: vec![Series {
                    label: "gcr".into(),
                    points: h.cascade.iter().map(|c| (c.stages as f64, c.mean_iou)).collect(),
                }],
            };
            save_line_plot(&plot, &png_path)?;
        }
    }
    files.push(csv_path);
    files.push(png_path);
    Ok(())
}

/// Writes the report and its tables and plots into `dir`; returns every
/// file written.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let path = dir.join(REPORT_FILE);
    fs::write(&path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    for e in &report.experiments {
        emit_experiment(e, dir, &mut files)?;
    }
    Ok(files)
}
