use super::{DatagenError, FilterReason, InstructionSample, TaskKind};
use crate::corpus::VideoRecord;
use crate::Label;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTally {
    pub kept: usize,
    pub discarded: usize,
    pub reasons: BTreeMap<FilterReason, usize>,
}

/// Kept and discarded counts per issue per task.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub per_issue: BTreeMap<String, BTreeMap<TaskKind, TaskTally>>,
}

impl FilterReport {
    pub fn tally(&self, issue_id: &str, task: TaskKind) -> TaskTally {
        self.per_issue
            .get(issue_id)
            .and_then(|t| t.get(&task))
            .cloned()
            .unwrap_or_default()
    }

    pub fn total_discarded(&self) -> usize {
        self.per_issue
            .values()
            .flat_map(|t| t.values())
            .map(|t| t.discarded)
            .sum()
    }

    pub fn total_kept(&self) -> usize {
        self.per_issue.values().flat_map(|t| t.values()).map(|t| t.kept).sum()
    }
}

/// Why `sample` contradicts the human labels, if it does.
fn verdict(sample: &InstructionSample, labels: &BTreeMap<String, Label>, human: Label) -> Option<FilterReason> {
    let derived = sample.derived_label?;
    match sample.task {
        TaskKind::Caption => None,
        TaskKind::VqaBinary => {
            (derived.is_positive() && !human.is_positive()).then_some(FilterReason::ViolationOnCleanVideo)
        }
        TaskKind::Cot => (derived != human).then_some(FilterReason::LabelMismatch),
        TaskKind::VqaMulti => {
            let mismatch = if sample.issue_labels.is_empty() {
                derived != human
            } else {
                sample
                    .issue_labels
                    .iter()
                    .any(|(issue, l)| labels.get(issue).is_some_and(|h| h != l))
            };
            mismatch.then_some(FilterReason::LabelMismatch)
        }
    }
}

/// Marks VQA and CoT samples that contradict the human labels in `corpus`.
///
/// CoT and multi-choice samples are discarded when their derived label differs from the
/// human label (multi-choice compares every issue the video has a label for). Binary VQA
/// samples are discarded only when they report a violation on a video labelled clean.
/// Captions are never touched. Samples already filtered as unparseable stay filtered.
/// Inputs are checked before any sample is modified, and rerunning gives the same result.
pub fn consistency_filter(
    samples: &mut [InstructionSample],
    corpus: &[VideoRecord],
) -> Result<FilterReport, DatagenError> {
    let index: HashMap<&str, &VideoRecord> = corpus.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut humans = Vec::with_capacity(samples.len());
    for s in samples.iter() {
        let video = index
            .get(s.video_id.as_str())
            .ok_or_else(|| DatagenError::UnknownVideo(s.video_id.clone()))?;
        let human = video
            .human_labels
            .get(&s.issue_id)
            .copied()
            .ok_or_else(|| DatagenError::MissingHumanLabel {
                video_id: s.video_id.clone(),
                issue_id: s.issue_id.clone(),
            })?;
        humans.push((human, &video.human_labels));
    }

    let mut report = FilterReport::default();
    for (s, (human, labels)) in samples.iter_mut().zip(humans) {
        if s.filter_reason != Some(FilterReason::UnparseableAnswer) {
            s.filter_reason = verdict(s, labels, human);
            s.filtered = s.filter_reason.is_some();
        }
        let tally = report
            .per_issue
            .entry(s.issue_id.clone())
            .or_default()
            .entry(s.task)
            .or_default();
        match s.filter_reason {
            Some(reason) => {
                tally.discarded += 1;
                *tally.reasons.entry(reason).or_default() += 1;
            }
            None => tally.kept += 1,
        }
    }
    Ok(report)
}
