//! Evaluation: zero-shot scoring through an annotator backend, ingestion of SFT-head
//! probabilities, metrics, the inconsistency detector, and report tables.

mod inconsistency;
mod metrics;
mod report;

pub use inconsistency::{detect_inconsistency, rationale_label, read_rationale, Consistency};
pub use metrics::{
    accuracy, f1, label_probability, meets_recall, precision_at_recall, precision_at_recall_points, roc_auc,
    roc_auc_points, scored, Confusion, MetricError,
};
pub use report::{
    build_report, compute_report, load_fixture, render_table, FixtureError, IssueCounts, IssueMetrics, Layout,
    MetricTable, MetricsReport, TableRow, DEFAULT_RECALL_TARGET, DEFAULT_THRESHOLD,
};

use crate::annotator::{AnnotationRequest, AnnotatorClient, AnnotatorError, RequestRoute};
use crate::answer::{extract_answer, AnswerFormat};
use crate::corpus::{Split, VideoRecord};
use crate::datagen::{render_prompt, PromptError, TemplateKind, TemplateSet};
use crate::guideline::GuidelineSet;
use crate::jsonl::{read_jsonl, JsonlError};
use crate::Label;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ZeroShot,
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub video_id: String,
    pub issue_id: String,
    pub human_label: Label,
    pub predicted_label: Label,
    /// Probability of the positive label; absent when the model exposes none.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
    pub mode: EvalMode,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("line {line}: video `{video_id}` is not in the corpus")]
    UnknownVideo { line: usize, video_id: String },
    #[error("line {line}: video `{video_id}` has no human label for issue `{issue_id}`")]
    MissingHumanLabel {
        line: usize,
        video_id: String,
        issue_id: String,
    },
    #[error("line {line}: probability {value} is outside [0, 1]")]
    InvalidProbability { line: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroShotSettings {
    pub answer_format: AnswerFormat,
    pub parallelism: usize,
    pub max_tokens: u32,
    pub threshold: f64,
}

impl Default for ZeroShotSettings {
    fn default() -> Self {
        ZeroShotSettings {
            answer_format: AnswerFormat::AnswerThenReason,
            parallelism: 4,
            max_tokens: 512,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// A zero-shot prediction that could not be scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub video_id: String,
    pub issue_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct ZeroShotOutput {
    /// Sorted by `(issue_id, video_id)`.
    pub records: Vec<EvalRecord>,
    pub failures: Vec<EvalFailure>,
    /// Per record, whether the final answer agrees with the explanation.
    pub consistency: Vec<Consistency>,
}

/// Asks the model whether each eval-split video violates each issue it is labelled for.
///
/// The score is the two-way softmax of the label-token logits and the predicted label is
/// `score >= threshold`. Without logits the label is read from the text and the score is
/// left empty.
pub fn run_zero_shot(
    videos: &[VideoRecord],
    guidelines: &GuidelineSet,
    templates: &TemplateSet,
    client: &AnnotatorClient,
    settings: &ZeroShotSettings,
) -> Result<ZeroShotOutput, EvalError> {
    let template = templates.get(TemplateKind::ZeroShot);
    let mut jobs = Vec::new();
    let mut requests = Vec::new();
    for video in videos.iter().filter(|v| v.split == Split::Eval) {
        for (issue_id, human) in &video.human_labels {
            let Some(issue) = guidelines.issue(issue_id) else {
                continue;
            };
            let prompt = render_prompt(template, issue, None)?;
            requests.push(
                AnnotationRequest::new(prompt, video.frame_refs.clone(), settings.max_tokens)
                    .with_route(RequestRoute::Classify {
                        video_id: video.video_id.clone(),
                        issue_id: issue_id.clone(),
                    })
                    .with_label_logits(),
            );
            jobs.push((video, issue, *human));
        }
    }
    let results = client.annotate_batch(&requests, settings.parallelism)?;

    let mut scored = Vec::new();
    let mut failures = Vec::new();
    for ((video, issue, human), result) in jobs.into_iter().zip(results) {
        let fail = |error: String| EvalFailure {
            video_id: video.video_id.clone(),
            issue_id: issue.issue_id.clone(),
            error,
        };
        let response = match result {
            Ok(r) => r,
            Err(e) => {
                failures.push(fail(e.to_string()));
                continue;
            }
        };
        let parsed = extract_answer(&response.text, settings.answer_format);
        let score = response.label_logits.map(label_probability).transpose()?;
        let (predicted, explanation) = match (score, parsed) {
            (Some(s), Ok((_, e))) => (Label::from_violation(s >= settings.threshold), Some(e)),
            (Some(s), Err(_)) => (Label::from_violation(s >= settings.threshold), None),
            (None, Ok((l, e))) => (l, Some(e)),
            (None, Err(e)) => {
                failures.push(fail(e.to_string()));
                continue;
            }
        };
        let consistency = match (&explanation, extract_answer(&response.text, settings.answer_format)) {
            (Some(e), Ok((text_label, _))) => detect_inconsistency(e, text_label, issue),
            _ => Consistency::Indeterminate,
        };
        scored.push((
            EvalRecord {
                video_id: video.video_id.clone(),
                issue_id: issue.issue_id.clone(),
                human_label: human,
                predicted_label: predicted,
                score,
                explanation,
                mode: EvalMode::ZeroShot,
            },
            consistency,
        ));
    }
    scored.sort_by(|a, b| (&a.0.issue_id, &a.0.video_id).cmp(&(&b.0.issue_id, &b.0.video_id)));
    let (records, consistency) = scored.into_iter().unzip();
    Ok(ZeroShotOutput {
        records,
        failures,
        consistency,
    })
}

/// One line of an SFT probability file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftPrediction {
    pub video_id: String,
    pub issue_id: String,
    pub probability: f64,
}

/// Joins SFT-head probabilities with human labels from `corpus`.
pub fn ingest_sft(
    predictions: &[SftPrediction],
    corpus: &[VideoRecord],
    threshold: f64,
) -> Result<Vec<EvalRecord>, EvalError> {
    let index: HashMap<&str, &VideoRecord> = corpus.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut records = predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let line = i + 1;
            if !(0.0..=1.0).contains(&p.probability) {
                return Err(EvalError::InvalidProbability {
                    line,
                    value: p.probability,
                });
            }
            let video = index.get(p.video_id.as_str()).ok_or_else(|| EvalError::UnknownVideo {
                line,
                video_id: p.video_id.clone(),
            })?;
            let human = *video
                .human_labels
                .get(&p.issue_id)
                .ok_or_else(|| EvalError::MissingHumanLabel {
                    line,
                    video_id: p.video_id.clone(),
                    issue_id: p.issue_id.clone(),
                })?;
            Ok(EvalRecord {
                video_id: p.video_id.clone(),
                issue_id: p.issue_id.clone(),
                human_label: human,
                predicted_label: Label::from_violation(p.probability >= threshold),
                score: Some(p.probability),
                explanation: None,
                mode: EvalMode::Sft,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    records.sort_by(|a, b| (&a.issue_id, &a.video_id).cmp(&(&b.issue_id, &b.video_id)));
    Ok(records)
}

pub fn load_sft_predictions(path: &Path) -> Result<Vec<SftPrediction>, EvalError> {
    Ok(read_jsonl(path)?)
}

/// Groups records by issue, issues in guideline order followed by any others sorted.
pub fn group_by_issue(records: &[EvalRecord], guidelines: &GuidelineSet) -> IndexMap<String, Vec<EvalRecord>> {
    let mut groups: IndexMap<String, Vec<EvalRecord>> = IndexMap::new();
    for issue in guidelines.iter() {
        groups.insert(issue.issue_id.clone(), Vec::new());
    }
    for r in records {
        groups.entry(r.issue_id.clone()).or_default().push(r.clone());
    }
    groups.retain(|_, v| !v.is_empty());
    groups
}
