//! Video records with human labels, JSONL storage, and a seeded synthetic corpus generator
//! whose labels are derived from known per-sub-question latent truth.

use crate::guideline::{AggregationRule, GuidelineSet, IssueSpec};
use crate::hashing::{keyed_hash, mix64};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::Label;
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible corpus spec: {0}")]
    InfeasibleSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
}

impl From<JsonlError> for CorpusError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { source, .. } => CorpusError::Io(source),
            JsonlError::Schema { line, message } => CorpusError::Schema { line, message },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Sft,
    Eval,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Pretrain => "pretrain",
            Split::Sft => "sft",
            Split::Eval => "eval",
        })
    }
}

/// Per-issue, per-sub-question violation indicators (`true` = violating).
pub type LatentTruth = BTreeMap<String, BTreeMap<String, bool>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub frame_refs: Vec<String>,
    #[serde(default)]
    pub overlay_text: String,
    #[serde(default)]
    pub hashtags: Vec<String>,
    pub human_labels: BTreeMap<String, Label>,
    pub split: Split,
    /// Present only on synthetic records.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_truth: Option<LatentTruth>,
}

impl VideoRecord {
    pub fn is_synthetic(&self) -> bool {
        self.latent_truth.is_some()
    }

    /// Ground-truth violation indicator, `false` when absent.
    pub fn latent(&self, issue_id: &str, subq_id: &str) -> bool {
        self.latent_truth
            .as_ref()
            .and_then(|t| t.get(issue_id))
            .and_then(|m| m.get(subq_id))
            .copied()
            .unwrap_or(false)
    }

    /// Checks that every human label equals the aggregate of the latent truth for its issue.
    pub fn check_derived_labels(&self, guidelines: &GuidelineSet) -> Result<(), String> {
        let Some(truth) = &self.latent_truth else {
            return Ok(());
        };
        for (issue_id, label) in &self.human_labels {
            let issue = guidelines
                .issue(issue_id)
                .ok_or_else(|| format!("{}: unknown issue `{issue_id}`", self.video_id))?;
            let empty = BTreeMap::new();
            let derived = issue.label_from_violations(truth.get(issue_id).unwrap_or(&empty));
            if derived != *label {
                return Err(format!(
                    "{}: human label {label} for `{issue_id}` but latent truth aggregates to {derived}",
                    self.video_id
                ));
            }
        }
        Ok(())
    }
}

/// Class counts for one issue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub pretrain_pos: usize,
    pub pretrain_neg: usize,
    pub sft_total: usize,
    pub sft_pos_rate: f64,
    pub eval_total: usize,
    pub eval_pos_rate: f64,
}

impl SplitCounts {
    /// 50k positive + 50k negative pretraining videos, 10% positive SFT, 1k eval at 50%.
    /// The SFT size is a placeholder; only its positive rate is fixed.
    pub const FULL_SCALE: SplitCounts = SplitCounts {
        pretrain_pos: 50_000,
        pretrain_neg: 50_000,
        sft_total: 10_000,
        sft_pos_rate: 0.1,
        eval_total: 1_000,
        eval_pos_rate: 0.5,
    };

    /// Pretraining counts scaled 1:100 from [`SplitCounts::FULL_SCALE`].
    pub const DESK_SCALE: SplitCounts = SplitCounts {
        pretrain_pos: 500,
        pretrain_neg: 500,
        sft_total: 1_000,
        sft_pos_rate: 0.1,
        eval_total: 1_000,
        eval_pos_rate: 0.5,
    };

    pub const EMPTY: SplitCounts = SplitCounts {
        pretrain_pos: 0,
        pretrain_neg: 0,
        sft_total: 0,
        sft_pos_rate: 0.0,
        eval_total: 0,
        eval_pos_rate: 0.0,
    };

    fn validate(&self, what: &str) -> Result<(), CorpusError> {
        for (name, rate) in [
            ("sft_pos_rate", self.sft_pos_rate),
            ("eval_pos_rate", self.eval_pos_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(CorpusError::InvalidSpec(format!(
                    "{what}: {name} = {rate} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// (split, positives, negatives). Rate-based splits round to the nearest integer.
    pub fn class_counts(&self) -> [(Split, usize, usize); 3] {
        let pos = |total: usize, rate: f64| ((total as f64 * rate).round() as usize).min(total);
        let sft_pos = pos(self.sft_total, self.sft_pos_rate);
        let eval_pos = pos(self.eval_total, self.eval_pos_rate);
        [
            (Split::Pretrain, self.pretrain_pos, self.pretrain_neg),
            (Split::Sft, sft_pos, self.sft_total - sft_pos),
            (Split::Eval, eval_pos, self.eval_total - eval_pos),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Counts applied to every issue without an override.
    #[serde(flatten)]
    pub counts: SplitCounts,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, SplitCounts>,
    pub seed: u64,
    #[serde(default = "default_frames")]
    pub frames_per_video: usize,
}

fn default_frames() -> usize {
    4
}

impl CorpusSpec {
    pub fn new(counts: SplitCounts, seed: u64) -> Self {
        CorpusSpec {
            counts,
            overrides: BTreeMap::new(),
            seed,
            frames_per_video: default_frames(),
        }
    }

    pub fn counts_for(&self, issue_id: &str) -> &SplitCounts {
        self.overrides.get(issue_id).unwrap_or(&self.counts)
    }

    pub fn validate(&self, guidelines: &GuidelineSet) -> Result<(), CorpusError> {
        self.counts.validate("default counts")?;
        for (issue_id, counts) in &self.overrides {
            if guidelines.issue(issue_id).is_none() {
                return Err(CorpusError::InvalidSpec(format!(
                    "override for unknown issue `{issue_id}`"
                )));
            }
            counts.validate(issue_id)?;
        }
        if self.frames_per_video == 0 {
            return Err(CorpusError::InvalidSpec("frames_per_video must be positive".into()));
        }
        Ok(())
    }
}

const OVERLAY_POOL: &[&str] = &[
    "Weekend vibes at the beach",
    "Trying the new ramen place downtown",
    "Day 12 of learning guitar",
    "Morning routine before work",
    "My cat reacting to snow",
    "Quick pasta recipe in five minutes",
    "Road trip highlights",
    "Rating every dessert at the fair",
    "Unboxing my new sneakers",
    "Sunset over the city skyline",
];

const HASHTAG_POOL: &[&str] = &[
    "#fyp", "#foryou", "#viral", "#food", "#travel", "#music", "#pets", "#diy", "#fashion", "#daily", "#funny",
    "#fitness",
];

/// Range of violating sub-answer counts that yields `positive` under `rule`.
fn violation_count_range(rule: AggregationRule, n: usize, positive: bool) -> (usize, usize) {
    match (rule, positive) {
        (AggregationRule::AnyPositive, true) => (1, n),
        (AggregationRule::AnyPositive, false) => (0, 0),
        (AggregationRule::AllPositive, true) => (n, n),
        (AggregationRule::AllPositive, false) => (0, n.saturating_sub(1)),
        (AggregationRule::KOfN { k }, true) => (k, n),
        (AggregationRule::KOfN { k }, false) => (0, k.saturating_sub(1)),
    }
}

struct VideoPlan {
    video_id: String,
    issue_idx: usize,
    split: Split,
    label: Label,
}

/// Generates a labelled corpus whose human labels are derived from sampled latent truth.
///
/// Each issue gets its own videos; every video carries a human label for that issue only,
/// and latent truth (all-clean for other issues) across every issue. Output is sorted by
/// `video_id` and depends only on `(guidelines, spec)`.
pub fn generate_synthetic_corpus(
    guidelines: &GuidelineSet,
    spec: &CorpusSpec,
) -> Result<Vec<VideoRecord>, CorpusError> {
    spec.validate(guidelines)?;
    let issues: Vec<&IssueSpec> = guidelines.iter().collect();
    let mut plan = Vec::new();
    for (issue_idx, issue) in issues.iter().enumerate() {
        for (split, pos, neg) in spec.counts_for(&issue.issue_id).class_counts() {
            if pos + neg == 0 {
                continue;
            }
            let n = issue.sub_questions.len();
            if n == 0 {
                return Err(CorpusError::InfeasibleSpec(format!(
                    "issue `{}` has no sub-questions to derive labels from",
                    issue.issue_id
                )));
            }
            if let AggregationRule::KOfN { k } = issue.aggregation {
                if (pos > 0 && k > n) || (neg > 0 && k == 0) {
                    return Err(CorpusError::InfeasibleSpec(format!(
                        "issue `{}`: k_of_n k={k} cannot produce the requested classes",
                        issue.issue_id
                    )));
                }
            }
            let mut labels: Vec<Label> = std::iter::repeat_n(Label::Positive, pos)
                .chain(std::iter::repeat_n(Label::Negative, neg))
                .collect();
            let split_name = split.to_string();
            let mut rng = ChaCha8Rng::seed_from_u64(keyed_hash(
                spec.seed,
                &[issue.issue_id.as_bytes(), split_name.as_bytes()],
            ));
            labels.shuffle(&mut rng);
            for (k, label) in labels.into_iter().enumerate() {
                plan.push(VideoPlan {
                    video_id: format!("{}_{}_{:06}", issue.issue_id, split_name, k),
                    issue_idx,
                    split,
                    label,
                });
            }
        }
    }

    let mut videos: Vec<VideoRecord> = plan
        .par_iter()
        .enumerate()
        .map(|(idx, p)| synth_video(idx as u64, p, &issues, spec))
        .collect();
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(videos)
}

fn synth_video(idx: u64, plan: &VideoPlan, issues: &[&IssueSpec], spec: &CorpusSpec) -> VideoRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed ^ mix64(idx)));
    let home = issues[plan.issue_idx];
    let n = home.sub_questions.len();
    let (lo, hi) = violation_count_range(home.aggregation, n, plan.label.is_positive());
    let hits = rng.random_range(lo..=hi);
    let chosen: HashSet<usize> = index::sample(&mut rng, n, hits).into_iter().collect();

    let mut latent = LatentTruth::new();
    let mut cues = Vec::new();
    for issue in issues {
        let is_home = issue.issue_id == home.issue_id;
        let row = issue
            .sub_questions
            .iter()
            .enumerate()
            .map(|(qi, q)| {
                let violating = is_home && chosen.contains(&qi);
                if violating {
                    cues.push(q.primary_cue());
                }
                (q.subq_id.clone(), violating)
            })
            .collect();
        latent.insert(issue.issue_id.clone(), row);
    }

    let mut overlay_text = OVERLAY_POOL.choose(&mut rng).copied().unwrap_or_default().to_owned();
    if !cues.is_empty() {
        overlay_text = format!("{overlay_text} - {}", cues.join(", "));
    }
    let mut hashtags: Vec<String> = HASHTAG_POOL
        .choose_multiple(&mut rng, 2)
        .map(|s| s.to_string())
        .collect();
    hashtags.extend(cues.iter().map(|c| {
        let tag: String = c.chars().filter(|ch| ch.is_alphanumeric()).collect();
        format!("#{}", tag.to_lowercase())
    }));

    VideoRecord {
        video_id: plan.video_id.clone(),
        frame_refs: (0..spec.frames_per_video)
            .map(|k| format!("synthetic://{}/frame/{k}", plan.video_id))
            .collect(),
        overlay_text,
        hashtags,
        human_labels: BTreeMap::from([(home.issue_id.clone(), plan.label)]),
        split: plan.split,
        latent_truth: Some(latent),
    }
}

/// Reads a corpus JSONL file. Records must have unique ids and at least one frame.
pub fn load_corpus(path: &Path) -> Result<Vec<VideoRecord>, CorpusError> {
    let records: Vec<VideoRecord> = read_jsonl(path)?;
    let mut seen = HashSet::with_capacity(records.len());
    // read_jsonl skips blank lines, so recover the physical line for error messages.
    let text = std::fs::read_to_string(path)?;
    let physical: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    for (i, r) in records.iter().enumerate() {
        let line = physical.get(i).copied().unwrap_or(i + 1);
        let fail = |message: String| CorpusError::Schema { line, message };
        if r.video_id.is_empty() {
            return Err(fail("empty video_id".into()));
        }
        if r.frame_refs.is_empty() {
            return Err(fail(format!("{}: frame_refs is empty", r.video_id)));
        }
        if !seen.insert(r.video_id.as_str()) {
            return Err(fail(format!("duplicate video_id `{}`", r.video_id)));
        }
    }
    Ok(records)
}

/// Writes records sorted by `video_id`. `strip_latent` drops latent truth to mimic real data.
pub fn store_corpus(records: &[VideoRecord], path: &Path, strip_latent: bool) -> Result<(), CorpusError> {
    let mut sorted: Vec<VideoRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    if strip_latent {
        for r in &mut sorted {
            r.latent_truth = None;
        }
    }
    write_jsonl(path, &sorted)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::three_issue_set;

    fn pretrain_only(pos: usize, neg: usize) -> SplitCounts {
        SplitCounts {
            pretrain_pos: pos,
            pretrain_neg: neg,
            ..SplitCounts::EMPTY
        }
    }

    #[test]
    fn per_issue_counts_are_exact() {
        let g = three_issue_set();
        let videos = generate_synthetic_corpus(&g, &CorpusSpec::new(pretrain_only(500, 500), 11)).unwrap();
        assert_eq!(videos.len(), 3000);
        for issue in g.iter() {
            let pos = videos
                .iter()
                .filter(|v| v.human_labels.get(&issue.issue_id) == Some(&Label::Positive))
                .count();
            assert_eq!(pos, 500, "{}", issue.issue_id);
        }
    }

    #[test]
    fn labels_derive_from_latent_truth() {
        let g = three_issue_set();
        let videos = generate_synthetic_corpus(&g, &CorpusSpec::new(SplitCounts::DESK_SCALE, 3)).unwrap();
        for v in &videos {
            v.check_derived_labels(&g).unwrap();
            let (issue, label) = v.human_labels.iter().next().unwrap();
            let hits = v.latent_truth.as_ref().unwrap()[issue].values().filter(|b| **b).count();
            assert_eq!(hits >= 1, label.is_positive());
        }
    }

    #[test]
    fn positives_use_every_violation_count() {
        let g = three_issue_set();
        let videos = generate_synthetic_corpus(&g, &CorpusSpec::new(pretrain_only(300, 0), 5)).unwrap();
        let mut seen = BTreeMap::new();
        for v in videos.iter().filter(|v| v.video_id.starts_with("fe_")) {
            let hits = v.latent_truth.as_ref().unwrap()["fe"].values().filter(|b| **b).count();
            *seen.entry(hits).or_insert(0) += 1;
        }
        assert_eq!(seen.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn rate_splits_round_to_exact_counts() {
        let g = three_issue_set();
        let videos = generate_synthetic_corpus(&g, &CorpusSpec::new(SplitCounts::DESK_SCALE, 3)).unwrap();
        let sft: Vec<_> = videos
            .iter()
            .filter(|v| v.split == Split::Sft && v.video_id.starts_with("ssc_"))
            .collect();
        assert_eq!(sft.len(), 1000);
        assert_eq!(sft.iter().filter(|v| v.human_labels["ssc"].is_positive()).count(), 100);
    }

    #[test]
    fn empty_spec_gives_empty_corpus() {
        let g = three_issue_set();
        let videos = generate_synthetic_corpus(&g, &CorpusSpec::new(SplitCounts::EMPTY, 1)).unwrap();
        assert!(videos.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let g = three_issue_set();
        let spec = CorpusSpec::new(pretrain_only(50, 50), 99);
        let a = serde_json::to_string(&generate_synthetic_corpus(&g, &spec).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_synthetic_corpus(&g, &spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = CorpusSpec::new(pretrain_only(50, 50), 100);
        let c = serde_json::to_string(&generate_synthetic_corpus(&g, &other).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_rate_and_unknown_override() {
        let g = three_issue_set();
        let mut spec = CorpusSpec::new(
            SplitCounts {
                eval_pos_rate: 1.5,
                ..SplitCounts::DESK_SCALE
            },
            1,
        );
        assert!(matches!(
            generate_synthetic_corpus(&g, &spec),
            Err(CorpusError::InvalidSpec(_))
        ));
        spec.counts = SplitCounts::DESK_SCALE;
        spec.overrides.insert("nope".into(), SplitCounts::EMPTY);
        assert!(matches!(
            generate_synthetic_corpus(&g, &spec),
            Err(CorpusError::InvalidSpec(_))
        ));
    }

    #[test]
    fn store_load_round_trip() {
        let g = three_issue_set();
        let videos = generate_synthetic_corpus(&g, &CorpusSpec::new(pretrain_only(17, 17), 4)).unwrap();
        let videos: Vec<_> = videos.into_iter().take(100).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let mut shuffled = videos.clone();
        shuffled.reverse();
        store_corpus(&shuffled, &path, false).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), videos);

        store_corpus(&videos, &path, true).unwrap();
        assert!(load_corpus(&path).unwrap().iter().all(|v| v.latent_truth.is_none()));
    }

    #[test]
    fn missing_video_id_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"video_id":"a","frame_refs":["f"],"human_labels":{},"split":"eval"}"#;
        let bad = r#"{"frame_refs":["f"],"human_labels":{},"split":"eval"}"#;
        std::fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match load_corpus(&path) {
            Err(CorpusError::Schema { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("video_id"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_frames_rejected_and_empty_file_ok() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
        std::fs::write(
            &path,
            "\n{\"video_id\":\"a\",\"frame_refs\":[],\"human_labels\":{},\"split\":\"eval\"}\n",
        )
        .unwrap();
        assert!(matches!(load_corpus(&path), Err(CorpusError::Schema { line: 2, .. })));
    }
}
