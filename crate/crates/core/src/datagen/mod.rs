//! Instruction-sample generation: Caption, binary VQA, multi-choice VQA and CoT samples,
//! plus the label-consistency filter.

mod filter;
mod prompt;

pub use filter::{consistency_filter, FilterReport, TaskTally};
pub use prompt::{options_block, render_prompt, PromptArgs, PromptError, PromptTemplate, TemplateKind, TemplateSet};

use crate::annotator::{AnnotationRequest, AnnotationResponse, AnnotatorClient, AnnotatorError, RequestRoute};
use crate::answer::{parse_option_letters, parse_yes_no, AnswerFormat};
use crate::corpus::{Split, VideoRecord};
use crate::guideline::{AggregateError, GuidelineSet, IssueSpec, SubQuestion};
use crate::hashing::sha256_parts;
use crate::{Answer, Label, GENERATOR_VERSION};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Caption,
    VqaBinary,
    VqaMulti,
    Cot,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Caption,
        TaskKind::VqaBinary,
        TaskKind::VqaMulti,
        TaskKind::Cot,
    ];

    pub fn as_str(self) -> &'static str {
        self.template().as_str()
    }

    pub fn template(self) -> TemplateKind {
        match self {
            TaskKind::Caption => TemplateKind::Caption,
            TaskKind::VqaBinary => TemplateKind::VqaBinary,
            TaskKind::VqaMulti => TemplateKind::VqaMulti,
            TaskKind::Cot => TemplateKind::Cot,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    /// No yes/no answer or option letters could be read from the response.
    UnparseableAnswer,
    /// Derived label disagrees with the human label.
    LabelMismatch,
    /// A violating sub-answer on a video the human labelled clean.
    ViolationOnCleanVideo,
}

impl fmt::Display for FilterReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterReason::UnparseableAnswer => "unparseable_answer",
            FilterReason::LabelMismatch => "label_mismatch",
            FilterReason::ViolationOnCleanVideo => "violation_on_clean_video",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: String,
    pub timestamp: String,
    pub generator_version: String,
}

impl Provenance {
    pub fn new(backend: impl Into<String>, timestamp: impl Into<String>) -> Self {
        Provenance {
            backend: backend.into(),
            timestamp: timestamp.into(),
            generator_version: GENERATOR_VERSION.to_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub sample_id: String,
    pub video_id: String,
    pub issue_id: String,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subq_id: Option<String>,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_label: Option<Label>,
    /// Per-issue labels decoded from a multi-choice answer.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub issue_labels: BTreeMap<String, Label>,
    pub filtered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_reason: Option<FilterReason>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
    pub provenance: Provenance,
}

impl InstructionSample {
    /// Checks the structural invariants of a sample. A sample filtered as unparseable has
    /// no derived label.
    pub fn check(&self) -> Result<(), String> {
        if self.subq_id.is_some() != (self.task == TaskKind::VqaBinary) {
            return Err(format!(
                "{}: subq_id must be set exactly for vqa_binary",
                self.sample_id
            ));
        }
        let unparseable = self.filter_reason == Some(FilterReason::UnparseableAnswer);
        let expect_label = self.task != TaskKind::Caption && !unparseable;
        if self.derived_label.is_some() != expect_label {
            return Err(format!(
                "{}: derived_label presence does not match task {}",
                self.sample_id, self.task
            ));
        }
        if self.filtered && self.task == TaskKind::Caption {
            return Err(format!("{}: caption samples are never filtered", self.sample_id));
        }
        if self.filtered != self.filter_reason.is_some() {
            return Err(format!("{}: filtered flag and filter_reason disagree", self.sample_id));
        }
        Ok(())
    }
}

/// Stable id from `(video, issue, task, subq)`; repeats beyond the first add their index.
pub fn sample_id(video_id: &str, issue_id: &str, task: TaskKind, subq_id: Option<&str>, variant: u32) -> String {
    let subq = subq_id.unwrap_or("");
    let mut hex = if variant == 0 {
        sha256_parts(&[video_id, issue_id, task.as_str(), subq])
    } else {
        sha256_parts(&[video_id, issue_id, task.as_str(), subq, &variant.to_string()])
    };
    hex.truncate(16);
    hex
}

/// Number of sentences, splitting on runs of `.`, `!` and `?`.
pub fn sentence_count(text: &str) -> usize {
    text.split(['.', '!', '?']).filter(|s| !s.trim().is_empty()).count()
}

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error("video `{0}` is not in the pretrain split")]
    NotPretrain(String),
    #[error("issue `{0}` is not defined in the guidelines")]
    UnknownIssue(String),
    #[error("no answer for sub-question `{subq_id}` of issue `{issue_id}`")]
    MissingAnswer { issue_id: String, subq_id: String },
    #[error("issue `{issue_id}` has no sub-question `{subq_id}`")]
    UnknownSubQuestion { issue_id: String, subq_id: String },
    #[error("multi-choice anchor issue `{0}` is not among the options")]
    AnchorNotInOptions(String),
    #[error("video `{0}` is not in the corpus")]
    UnknownVideo(String),
    #[error("video `{video_id}` has no human label for issue `{issue_id}`")]
    MissingHumanLabel { video_id: String, issue_id: String },
}

/// How many samples of each kind to emit per (video, issue) pair. Binary VQA counts are
/// per sub-question. Repeats re-query the annotator; deterministic backends answer the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Multiplicity {
    pub caption: u32,
    pub vqa_binary: u32,
    pub vqa_multi: u32,
    pub cot: u32,
}

impl Default for Multiplicity {
    fn default() -> Self {
        Multiplicity {
            caption: 1,
            vqa_binary: 1,
            vqa_multi: 1,
            cot: 1,
        }
    }
}

impl Multiplicity {
    /// Samples emitted for one pair whose issue has `n_subq` sub-questions.
    pub fn per_pair(&self, n_subq: usize, multi_enabled: bool) -> usize {
        let multi = if multi_enabled { self.vqa_multi as usize } else { 0 };
        self.caption as usize + n_subq * self.vqa_binary as usize + multi + self.cot as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSettings {
    pub multiplicity: Multiplicity,
    pub parallelism: usize,
    pub answer_format: AnswerFormat,
    /// Written into provenance. Fixed rather than read from the clock so reruns are identical.
    pub timestamp: String,
    pub max_tokens: u32,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        GenerationSettings {
            multiplicity: Multiplicity::default(),
            parallelism: 4,
            answer_format: AnswerFormat::AnswerThenReason,
            timestamp: "1970-01-01T00:00:00Z".into(),
            max_tokens: 512,
        }
    }
}

/// One generation attempt that produced no sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub video_id: String,
    pub issue_id: String,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subq_id: Option<String>,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct GenerationOutput {
    /// Sorted by `sample_id`.
    pub samples: Vec<InstructionSample>,
    pub failures: Vec<GenerationFailure>,
}

pub struct Generator<'a> {
    guidelines: &'a GuidelineSet,
    templates: &'a TemplateSet,
    client: &'a AnnotatorClient,
    settings: GenerationSettings,
    provenance: Provenance,
}

/// Sub-question answers parsed from binary VQA responses, keyed by `subq_id`.
pub type VqaAnswers = BTreeMap<String, (Answer, String)>;

fn require_pretrain(video: &VideoRecord) -> Result<(), DatagenError> {
    if video.split == Split::Pretrain {
        Ok(())
    } else {
        Err(DatagenError::NotPretrain(video.video_id.clone()))
    }
}

impl<'a> Generator<'a> {
    pub fn new(
        guidelines: &'a GuidelineSet,
        templates: &'a TemplateSet,
        client: &'a AnnotatorClient,
        settings: GenerationSettings,
    ) -> Self {
        let provenance = Provenance::new(client.backend_id(), settings.timestamp.clone());
        Generator {
            guidelines,
            templates,
            client,
            settings,
            provenance,
        }
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    fn sample(
        &self,
        video: &VideoRecord,
        issue: &IssueSpec,
        task: TaskKind,
        subq: Option<&str>,
        variant: u32,
    ) -> InstructionSample {
        InstructionSample {
            sample_id: sample_id(&video.video_id, &issue.issue_id, task, subq, variant),
            video_id: video.video_id.clone(),
            issue_id: issue.issue_id.clone(),
            task,
            subq_id: subq.map(str::to_owned),
            prompt: String::new(),
            response: String::new(),
            derived_label: None,
            issue_labels: BTreeMap::new(),
            filtered: false,
            filter_reason: None,
            diagnostics: Vec::new(),
            provenance: self.provenance.clone(),
        }
    }

    fn request(&self, prompt: String, video: &VideoRecord, route: RequestRoute) -> AnnotationRequest {
        AnnotationRequest::new(prompt, video.frame_refs.clone(), self.settings.max_tokens).with_route(route)
    }

    pub fn caption_request(
        &self,
        video: &VideoRecord,
        issue: &IssueSpec,
        variant: u32,
    ) -> Result<AnnotationRequest, PromptError> {
        let prompt = render_prompt(self.templates.get(TemplateKind::Caption), issue, None)?;
        Ok(self.request(
            prompt,
            video,
            RequestRoute::Caption {
                video_id: video.video_id.clone(),
                issue_id: issue.issue_id.clone(),
                variant,
            },
        ))
    }

    pub fn caption_sample(
        &self,
        video: &VideoRecord,
        issue: &IssueSpec,
        variant: u32,
        request: &AnnotationRequest,
        response: AnnotationResponse,
    ) -> InstructionSample {
        let mut s = self.sample(video, issue, TaskKind::Caption, None, variant);
        s.prompt = request.prompt.clone();
        s.response = response.text;
        let n = sentence_count(&s.response);
        if !(2..=3).contains(&n) {
            s.diagnostics.push(format!("caption has {n} sentences, expected 2-3"));
        }
        s
    }

    pub fn generate_caption(&self, video: &VideoRecord, issue: &IssueSpec) -> Result<InstructionSample, DatagenError> {
        require_pretrain(video)?;
        let req = self.caption_request(video, issue, 0)?;
        let resp = self.client.annotate(&req)?;
        Ok(self.caption_sample(video, issue, 0, &req, resp))
    }

    pub fn binary_request(
        &self,
        video: &VideoRecord,
        issue: &IssueSpec,
        subq: &SubQuestion,
    ) -> Result<AnnotationRequest, PromptError> {
        let prompt = render_prompt(self.templates.get(TemplateKind::VqaBinary), issue, Some(subq))?;
        Ok(self.request(
            prompt,
            video,
            RequestRoute::BinaryVqa {
                video_id: video.video_id.clone(),
                issue_id: issue.issue_id.clone(),
                subq_id: subq.subq_id.clone(),
            },
        ))
    }

    /// Builds the sample and, when parseable, returns the answer and explanation for CoT.
    pub fn binary_sample(
        &self,
        video: &VideoRecord,
        issue: &IssueSpec,
        subq: &SubQuestion,
        variant: u32,
        request: &AnnotationRequest,
        response: AnnotationResponse,
    ) -> (InstructionSample, Option<(Answer, String)>) {
        let mut s = self.sample(video, issue, TaskKind::VqaBinary, Some(&subq.subq_id), variant);
        s.prompt = request.prompt.clone();
        s.response = response.text;
        match parse_yes_no(&s.response, self.settings.answer_format) {
            Ok((answer, explanation)) => {
                s.derived_label = Some(Label::from_violation(subq.is_violation(answer)));
                (s, Some((answer, explanation)))
            }
            Err(e) => {
                s.filtered = true;
                s.filter_reason = Some(FilterReason::UnparseableAnswer);
                s.diagnostics.push(e.to_string());
                (s, None)
            }
        }
    }

    pub fn generate_binary_vqa(
        &self,
        video: &VideoRecord,
        issue: &IssueSpec,
        subq: &SubQuestion,
    ) -> Result<InstructionSample, DatagenError> {
        require_pretrain(video)?;
        let req = self.binary_request(video, issue, subq)?;
        let resp = self.client.annotate(&req)?;
        Ok(self.binary_sample(video, issue, subq, 0, &req, resp).0)
    }

    pub fn multi_request(&self, video: &VideoRecord, options: &[&IssueSpec]) -> Result<AnnotationRequest, PromptError> {
        let prompt = self.templates.get(TemplateKind::VqaMulti).render(PromptArgs {
            options: Some(options),
            ..Default::default()
        })?;
        Ok(self.request(
            prompt,
            video,
            RequestRoute::MultiChoice {
                video_id: video.video_id.clone(),
                issue_ids: options.iter().map(|i| i.issue_id.clone()).collect(),
            },
        ))
    }

    /// `anchor` is the issue the sample is filed under; its label becomes `derived_label`.
    pub fn multi_sample(
        &self,
        video: &VideoRecord,
        anchor: &IssueSpec,
        options: &[&IssueSpec],
        variant: u32,
        request: &AnnotationRequest,
        response: AnnotationResponse,
    ) -> InstructionSample {
        let mut s = self.sample(video, anchor, TaskKind::VqaMulti, None, variant);
        s.prompt = request.prompt.clone();
        s.response = response.text;
        match parse_option_letters(&s.response, self.settings.answer_format, options.len()) {
            Ok(selection) => {
                s.issue_labels = options
                    .iter()
                    .enumerate()
                    .map(|(i, issue)| {
                        (
                            issue.issue_id.clone(),
                            Label::from_violation(selection.selected.contains(&i)),
                        )
                    })
                    .collect();
                s.derived_label = s.issue_labels.get(&anchor.issue_id).copied();
            }
            Err(e) => {
                s.filtered = true;
                s.filter_reason = Some(FilterReason::UnparseableAnswer);
                s.diagnostics.push(e.to_string());
            }
        }
        s
    }

    pub fn generate_multichoice_vqa(
        &self,
        video: &VideoRecord,
        anchor: &IssueSpec,
        options: &[&IssueSpec],
    ) -> Result<InstructionSample, DatagenError> {
        require_pretrain(video)?;
        if !options.iter().any(|o| o.issue_id == anchor.issue_id) {
            return Err(DatagenError::AnchorNotInOptions(anchor.issue_id.clone()));
        }
        let req = self.multi_request(video, options)?;
        let resp = self.client.annotate(&req)?;
        Ok(self.multi_sample(video, anchor, options, 0, &req, resp))
    }

    /// Assembles a CoT sample from binary VQA answers without another annotator call.
    pub fn generate_cot(
        &self,
        video: &VideoRecord,
        issue: &IssueSpec,
        vqa_answers: &VqaAnswers,
    ) -> Result<InstructionSample, DatagenError> {
        self.cot_sample(video, issue, vqa_answers, 0)
    }

    fn cot_sample(
        &self,
        video: &VideoRecord,
        issue: &IssueSpec,
        vqa_answers: &VqaAnswers,
        variant: u32,
    ) -> Result<InstructionSample, DatagenError> {
        let (response, label) = cot_response(issue, vqa_answers)?;
        let mut s = self.sample(video, issue, TaskKind::Cot, None, variant);
        s.prompt = render_prompt(self.templates.get(TemplateKind::Cot), issue, None)?;
        s.response = response;
        s.derived_label = Some(label);
        Ok(s)
    }

    /// Generates every sample for the pretrain split: for each video and each issue it has a
    /// human label for, captions, one binary VQA per sub-question, a multi-choice VQA over all
    /// issues (when there are at least two) and a CoT sample built from the binary answers.
    ///
    /// Requests run through the client with the configured parallelism; output is sorted by
    /// `sample_id`, so it does not depend on scheduling.
    pub fn generate_pretraining_samples(&self, videos: &[VideoRecord]) -> Result<GenerationOutput, DatagenError> {
        let m = self.settings.multiplicity;
        let options: Vec<&IssueSpec> = self.guidelines.iter().collect();
        let multi_enabled = options.len() >= 2;
        let mut pairs: Vec<(&VideoRecord, &IssueSpec)> = Vec::new();
        for video in videos.iter().filter(|v| v.split == Split::Pretrain) {
            for issue_id in video.human_labels.keys() {
                let issue = self
                    .guidelines
                    .issue(issue_id)
                    .ok_or_else(|| DatagenError::UnknownIssue(issue_id.clone()))?;
                pairs.push((video, issue));
            }
        }
        pairs.sort_by(|a, b| (&a.0.video_id, &a.1.issue_id).cmp(&(&b.0.video_id, &b.1.issue_id)));

        enum Job {
            Caption(u32),
            Binary(usize, u32),
            Multi(u32),
        }
        let mut jobs: Vec<(usize, Job)> = Vec::new();
        let mut requests = Vec::new();
        for (p, (video, issue)) in pairs.iter().enumerate() {
            for v in 0..m.caption {
                requests.push(self.caption_request(video, issue, v)?);
                jobs.push((p, Job::Caption(v)));
            }
            for (qi, q) in issue.sub_questions.iter().enumerate() {
                let req = self.binary_request(video, issue, q)?;
                for v in 0..m.vqa_binary {
                    requests.push(req.clone());
                    jobs.push((p, Job::Binary(qi, v)));
                }
            }
            if multi_enabled && m.vqa_multi > 0 {
                let req = self.multi_request(video, &options)?;
                for v in 0..m.vqa_multi {
                    requests.push(req.clone());
                    jobs.push((p, Job::Multi(v)));
                }
            }
        }
        tracing::info!(pairs = pairs.len(), requests = requests.len(), "generating samples");
        let results = self.client.annotate_batch(&requests, self.settings.parallelism)?;

        let mut out = GenerationOutput::default();
        let mut answers: HashMap<usize, VqaAnswers> = HashMap::new();
        for (((p, job), req), result) in jobs.into_iter().zip(&requests).zip(results) {
            let (video, issue) = pairs[p];
            let (task, subq) = match job {
                Job::Caption(_) => (TaskKind::Caption, None),
                Job::Binary(qi, _) => (TaskKind::VqaBinary, Some(&issue.sub_questions[qi])),
                Job::Multi(_) => (TaskKind::VqaMulti, None),
            };
            let response = match result {
                Ok(r) => r,
                Err(e) => {
                    out.failures.push(GenerationFailure {
                        video_id: video.video_id.clone(),
                        issue_id: issue.issue_id.clone(),
                        task,
                        subq_id: subq.map(|q| q.subq_id.clone()),
                        error: e.to_string(),
                    });
                    continue;
                }
            };
            let sample = match job {
                Job::Caption(v) => self.caption_sample(video, issue, v, req, response),
                Job::Binary(qi, v) => {
                    let q = &issue.sub_questions[qi];
                    let (s, parsed) = self.binary_sample(video, issue, q, v, req, response);
                    if let (0, Some(a)) = (v, parsed) {
                        answers.entry(p).or_default().insert(q.subq_id.clone(), a);
                    }
                    s
                }
                Job::Multi(v) => self.multi_sample(video, issue, &options, v, req, response),
            };
            out.samples.push(sample);
        }

        for (p, (video, issue)) in pairs.iter().enumerate() {
            let empty = VqaAnswers::new();
            let pair_answers = answers.get(&p).unwrap_or(&empty);
            for v in 0..m.cot {
                match self.cot_sample(video, issue, pair_answers, v) {
                    Ok(s) => out.samples.push(s),
                    Err(e) => out.failures.push(GenerationFailure {
                        video_id: video.video_id.clone(),
                        issue_id: issue.issue_id.clone(),
                        task: TaskKind::Cot,
                        subq_id: None,
                        error: e.to_string(),
                    }),
                }
            }
        }

        out.samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        if let Some(w) = out.samples.windows(2).find(|w| w[0].sample_id == w[1].sample_id) {
            panic!("duplicate sample id {}", w[0].sample_id);
        }
        out.failures.sort_by(|a, b| {
            (&a.video_id, &a.issue_id, a.task, &a.subq_id).cmp(&(&b.video_id, &b.issue_id, b.task, &b.subq_id))
        });
        if !out.failures.is_empty() {
            tracing::warn!(failures = out.failures.len(), "some samples could not be generated");
        }
        Ok(out)
    }
}

/// Stepwise rationale over every sub-question, ending with the conclusion the issue's
/// aggregation rule gives. Returns the text and the concluded label.
pub fn cot_response(issue: &IssueSpec, vqa_answers: &VqaAnswers) -> Result<(String, Label), DatagenError> {
    let plain: BTreeMap<String, Answer> = vqa_answers.iter().map(|(k, (a, _))| (k.clone(), *a)).collect();
    let label = issue.aggregate(&plain).map_err(|e| match e {
        AggregateError::MissingAnswer(subq_id) => DatagenError::MissingAnswer {
            issue_id: issue.issue_id.clone(),
            subq_id,
        },
        AggregateError::UnknownAnswer(subq_id) => DatagenError::UnknownSubQuestion {
            issue_id: issue.issue_id.clone(),
            subq_id,
        },
    })?;
    let mut text = String::new();
    let mut violations = 0;
    for (i, q) in issue.sub_questions.iter().enumerate() {
        let (answer, explanation) = &vqa_answers[&q.subq_id];
        violations += q.is_violation(*answer) as usize;
        text.push_str(&format!("Step {}: {} {}.", i + 1, q.question_text, answer.token()));
        if !explanation.is_empty() {
            text.push(' ');
            text.push_str(explanation);
        }
        text.push('\n');
    }
    let verdict = match label {
        Label::Positive => "the video violates",
        Label::Negative => "the video does not violate",
    };
    text.push_str(&format!(
        "Conclusion: {violations} of {} sub-questions indicate a violation, so {verdict} the {} policy. The final conclusion is {label}.",
        issue.sub_questions.len(),
        issue.title
    ));
    Ok((text, label))
}
