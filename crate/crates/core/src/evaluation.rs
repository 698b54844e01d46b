//! Detection metrics with anomaly as the positive class, aggregation across
//! repeated runs and the comparison grids used in reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::model::ModelKind;
use crate::scoring::{ScoreKind, ScoreRecord, Verdict};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(records: &[ScoreRecord]) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for r in records {
        let truth = match r.ground_truth {
            Some(Label::Normal) => false,
            Some(Label::Abnormal) => true,
            _ => {
                return Err(Error::Usage(format!(
                    "record `{}` has no ground-truth label",
                    r.id
                )))
            }
        };
        match (r.verdict == Verdict::Anomaly, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Precision, recall and F1. A zero denominator yields 0 and sets the
/// matching `*_undefined` flag.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
}

pub fn precision_recall_f1(c: &ConfusionCounts) -> Metrics {
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            (0.0, true)
        } else {
            (num as f64 / den as f64, false)
        }
    };
    let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
    let (f1, f1_undefined) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    Metrics {
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (`n − 1`); 0 for a single run.
    pub std: f64,
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Usage(
            "cannot aggregate an empty list of runs".into(),
        ));
    }
    if values.iter().all(|&v| v == values[0]) {
        // Exact for constant input; summation would leave rounding residue.
        return Ok(MeanStd {
            mean: values[0],
            std: 0.0,
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanStd { mean, std })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

pub fn aggregate_runs(runs: &[Metrics]) -> Result<RunAggregate> {
    let col = |f: fn(&Metrics) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    Ok(RunAggregate {
        runs: runs.len(),
        precision: col(|m| m.precision)?,
        recall: col(|m| m.recall)?,
        f1: col(|m| m.f1)?,
    })
}

/// Method × score combinations compared in the main report.
pub fn method_score_grid() -> Vec<(ModelKind, ScoreKind)> {
    vec![
        (ModelKind::Cae, ScoreKind::Recon),
        (ModelKind::Cae, ScoreKind::Gradcon),
        (ModelKind::Vae, ScoreKind::Recon),
        (ModelKind::Vae, ScoreKind::Elbo),
        (ModelKind::Vae, ScoreKind::Gradcon),
        (ModelKind::BetaVae, ScoreKind::Recon),
        (ModelKind::BetaVae, ScoreKind::Elbo),
        (ModelKind::BetaVae, ScoreKind::Gradcon),
    ]
}

pub const DEFAULT_BETA_SWEEP: [f64; 5] = [0.01, 0.1, 1.0, 3.0, 10.0];

pub fn beta_label(beta: f64) -> String {
    if beta == 1.0 {
        "1 (VAE)".to_string()
    } else {
        format!("{beta}")
    }
}

fn method_label(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Cae => "CAE",
        ModelKind::Vae => "VAE",
        ModelKind::BetaVae => "β-VAE",
    }
}

fn score_label(kind: ScoreKind) -> &'static str {
    match kind {
        ScoreKind::Recon => "Recon",
        ScoreKind::Elbo => "ELBO",
        ScoreKind::Gradcon => "GradCon",
    }
}

fn render_grid(columns: &[String], cells: &[Option<RunAggregate>], notes: &[String]) -> String {
    let mut out = String::new();
    for n in notes {
        let _ = writeln!(out, "# {n}");
    }
    let width = columns
        .iter()
        .map(|c| c.chars().count())
        .max()
        .unwrap_or(0)
        .max(15);
    let _ = write!(out, "{:<10}", "Metric");
    for c in columns {
        let _ = write!(out, " | {c:^width$}");
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(10 + columns.len() * (width + 3)));
    let rows: [(&str, fn(&RunAggregate) -> MeanStd); 3] = [
        ("Precision", |a| a.precision),
        ("Recall", |a| a.recall),
        ("F1", |a| a.f1),
    ];
    for (metric, get) in rows {
        let _ = write!(out, "{metric:<10}");
        for cell in cells {
            let text = cell
                .map(|a| get(&a).to_string())
                .unwrap_or_else(|| "n/a".into());
            let _ = write!(out, " | {text:^width$}");
        }
        out.push('\n');
    }
    out
}

pub fn method_column_label(model: ModelKind, score: ScoreKind) -> String {
    format!("{} {}", method_label(model), score_label(score))
}

/// Method × score table. Cells absent from `results` are shown as `n/a`.
pub fn render_method_table(
    results: &[((ModelKind, ScoreKind), RunAggregate)],
    notes: &[String],
) -> String {
    let grid = method_score_grid();
    let columns: Vec<String> = grid
        .iter()
        .map(|&(m, s)| method_column_label(m, s))
        .collect();
    let cells: Vec<Option<RunAggregate>> = grid
        .iter()
        .map(|key| results.iter().find(|(k, _)| k == key).map(|(_, a)| *a))
        .collect();
    render_grid(&columns, &cells, notes)
}

pub fn render_beta_table(results: &[(f64, RunAggregate)], notes: &[String]) -> String {
    let columns: Vec<String> = results
        .iter()
        .map(|(b, _)| format!("β={}", beta_label(*b)))
        .collect();
    let cells: Vec<Option<RunAggregate>> = results.iter().map(|(_, a)| Some(*a)).collect();
    render_grid(&columns, &cells, notes)
}

/// Flat row for machine-readable reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub column: String,
    pub runs: usize,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

impl ReportRow {
    pub fn new(column: impl Into<String>, a: &RunAggregate) -> Self {
        Self {
            column: column.into(),
            runs: a.runs,
            precision_mean: a.precision.mean,
            precision_std: a.precision.std,
            recall_mean: a.recall.mean,
            recall_std: a.recall.std,
            f1_mean: a.f1.mean,
            f1_std: a.f1.std,
        }
    }
}

pub fn write_report_csv(path: &std::path::Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
