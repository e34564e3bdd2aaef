//! Metric tables: per-issue metrics, pooled overall AUC, and markdown rendering with
//! column-max bolding. Published tables can be loaded as fixtures and rendered alongside.

use super::metrics::{accuracy, f1, precision_at_recall_points, roc_auc_points, scored, Confusion, MetricError};
use super::{EvalMode, EvalRecord};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::fmt::Write;
use std::path::Path;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RECALL_TARGET: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueCounts {
    pub total: usize,
    pub positives: usize,
    pub negatives: usize,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueMetrics {
    pub accuracy: f64,
    pub f1: f64,
    /// Absent when any record lacks a score.
    pub auc: Option<f64>,
    pub p_at_r90: Option<f64>,
    pub counts: IssueCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    pub threshold: f64,
    pub recall_target: f64,
    pub per_issue: IndexMap<String, IssueMetrics>,
    /// AUC over the pooled records of every issue.
    pub overall_auc: Option<f64>,
}

fn all_scored(records: &[EvalRecord]) -> Result<Option<Vec<(bool, f64)>>, MetricError> {
    if records.iter().any(|r| r.score.is_none()) {
        return Ok(None);
    }
    scored(records).map(Some)
}

/// Computes per-issue and pooled metrics. Issues keep the order of `records_by_issue`.
pub fn compute_report(
    records_by_issue: &IndexMap<String, Vec<EvalRecord>>,
    mode: EvalMode,
) -> Result<MetricsReport, MetricError> {
    let mut per_issue = IndexMap::new();
    let mut pooled: Option<Vec<(bool, f64)>> = Some(Vec::new());
    for (issue, records) in records_by_issue {
        let points = all_scored(records)?;
        let c = Confusion::from_records(records);
        let positives = records.iter().filter(|r| r.human_label.is_positive()).count();
        let (auc, p_at_r90) = match &points {
            Some(p) => (
                Some(roc_auc_points(p)?),
                Some(precision_at_recall_points(p, DEFAULT_RECALL_TARGET)?),
            ),
            None => (None, None),
        };
        pooled = match (pooled, points) {
            (Some(mut all), Some(p)) => {
                all.extend(p);
                Some(all)
            }
            _ => None,
        };
        per_issue.insert(
            issue.clone(),
            IssueMetrics {
                accuracy: accuracy(records)?,
                f1: f1(records)?,
                auc,
                p_at_r90,
                counts: IssueCounts {
                    total: records.len(),
                    positives,
                    negatives: records.len() - positives,
                    true_positives: c.tp,
                    false_positives: c.fp,
                },
            },
        );
    }
    if per_issue.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(MetricsReport {
        mode,
        threshold: DEFAULT_THRESHOLD,
        recall_target: DEFAULT_RECALL_TARGET,
        per_issue,
        overall_auc: pooled.map(|p| roc_auc_points(&p)).transpose()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// ACC and F1 per issue.
    ZeroShot,
    /// AUC, ACC and P@R90 per issue.
    Sft,
}

impl Layout {
    fn columns(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Layout::ZeroShot => &[("acc", "ACC"), ("f1", "F1")],
            Layout::Sft => &[("auc", "AUC"), ("acc", "ACC"), ("p_at_r90", "P@R90")],
        }
    }
}

impl From<EvalMode> for Layout {
    fn from(mode: EvalMode) -> Self {
        match mode {
            EvalMode::ZeroShot => Layout::ZeroShot,
            EvalMode::Sft => Layout::Sft,
        }
    }
}

/// One table row; metric values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    /// Issue → metric key (`acc`, `f1`, `auc`, `p_at_r90`) → value.
    pub metrics: IndexMap<String, IndexMap<String, f64>>,
    #[serde(default)]
    pub overall_auc: Option<f64>,
}

/// A metric table, either measured here or transcribed from a publication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub title: String,
    pub layout: Layout,
    #[serde(default = "default_row_header")]
    pub row_header: String,
    pub issues: Vec<String>,
    /// Render an "Overall AUC" column; rows without a value show a dash.
    #[serde(default)]
    pub overall_column: bool,
    pub rows: Vec<TableRow>,
}

fn default_row_header() -> String {
    "Model".into()
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("cannot read fixture {path}: {message}")]
    Read { path: String, message: String },
}

pub fn load_fixture(path: &Path) -> Result<MetricTable, FixtureError> {
    let err = |message: String| FixtureError::Read {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

fn pct(x: f64) -> f64 {
    x * 100.0
}

impl MetricsReport {
    /// The report as a one-row table in the layout matching its mode.
    pub fn to_table(&self, title: &str, model: &str, strategy: Option<&str>) -> MetricTable {
        let layout = Layout::from(self.mode);
        let metrics = self
            .per_issue
            .iter()
            .map(|(issue, m)| {
                let mut cells = IndexMap::new();
                for (key, _) in layout.columns() {
                    let v = match *key {
                        "acc" => Some(m.accuracy),
                        "f1" => Some(m.f1),
                        "auc" => m.auc,
                        "p_at_r90" => m.p_at_r90,
                        _ => None,
                    };
                    if let Some(v) = v {
                        cells.insert(key.to_string(), pct(v));
                    }
                }
                (issue.to_uppercase(), cells)
            })
            .collect();
        MetricTable {
            title: title.into(),
            layout,
            row_header: default_row_header(),
            issues: self.per_issue.keys().map(|i| i.to_uppercase()).collect(),
            overall_column: true,
            rows: vec![TableRow {
                model: model.into(),
                strategy: strategy.map(str::to_owned),
                metrics,
                overall_auc: self.overall_auc.map(pct),
            }],
        }
    }
}

/// Value in hundredths of a percent, as displayed.
fn hundredths(v: f64) -> i64 {
    (v * 100.0).round() as i64
}

fn cell(v: Option<f64>, max: Option<i64>) -> String {
    match v {
        None => "-".into(),
        Some(v) if Some(hundredths(v)) == max => format!("**{v:.2}**"),
        Some(v) => format!("{v:.2}"),
    }
}

type Column<'a> = Box<dyn Fn(&TableRow) -> Option<f64> + 'a>;

/// Markdown table with two-decimal percentages, the highest displayed value of each
/// column in bold (ties all bold), and `-` for missing values.
pub fn render_table(table: &MetricTable) -> String {
    let with_strategy = table.rows.iter().any(|r| r.strategy.is_some());
    let mut columns: Vec<(String, Column<'_>)> = Vec::new();
    for issue in &table.issues {
        for (key, label) in table.layout.columns() {
            let issue = issue.clone();
            columns.push((
                format!("{issue} {label}"),
                Box::new(move |r: &TableRow| r.metrics.get(&issue).and_then(|m| m.get(*key)).copied()),
            ));
        }
    }
    if table.overall_column {
        columns.push(("Overall AUC".into(), Box::new(|r: &TableRow| r.overall_auc)));
    }

    let mut out = String::new();
    writeln!(out, "### {}", table.title).unwrap();
    out.push('\n');
    let mut header = vec![table.row_header.clone()];
    let mut rule = vec!["---".to_string()];
    if with_strategy {
        header.push("Pretraining strategy".into());
        rule.push("---".into());
    }
    for (name, _) in &columns {
        header.push(name.clone());
        rule.push("---:".into());
    }
    writeln!(out, "| {} |", header.join(" | ")).unwrap();
    writeln!(out, "|{}|", rule.join("|")).unwrap();

    let maxima: Vec<Option<i64>> = columns
        .iter()
        .map(|(_, get)| table.rows.iter().filter_map(get).map(hundredths).max())
        .collect();
    for row in &table.rows {
        let mut cells = vec![row.model.clone()];
        if with_strategy {
            cells.push(row.strategy.clone().unwrap_or_else(|| "-".into()));
        }
        for ((_, get), max) in columns.iter().zip(&maxima) {
            cells.push(cell(get(row), *max));
        }
        writeln!(out, "| {} |", cells.join(" | ")).unwrap();
    }
    out
}

/// Renders the measured report, followed by a reference table when one is given.
pub fn build_report(
    records_by_issue: &IndexMap<String, Vec<EvalRecord>>,
    mode: EvalMode,
    model: &str,
    reference: Option<&MetricTable>,
) -> Result<(MetricsReport, String), MetricError> {
    let report = compute_report(records_by_issue, mode)?;
    let title = match mode {
        EvalMode::ZeroShot => "Zero-shot evaluation (%)",
        EvalMode::Sft => "SFT evaluation (%)",
    };
    let mut text = render_table(&report.to_table(title, model, None));
    if let Some(r) = reference {
        text.push('\n');
        text.push_str(&render_table(r));
    }
    Ok((report, text))
}
