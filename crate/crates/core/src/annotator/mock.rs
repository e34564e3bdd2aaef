use super::{AnnotationRequest, AnnotationResponse, AnnotatorError, Backend, LabelLogits, RequestRoute};
use crate::answer::{option_letter, AnswerFormat};
use crate::corpus::{LatentTruth, VideoRecord};
use crate::guideline::{GuidelineSet, IssueSpec, SubQuestion};
use crate::hashing::{keyed_hash, unit_interval};
use crate::Answer;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

/// Noise model of the mock annotator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockAnnotatorConfig {
    /// Probability that a sub-question answer disagrees with latent truth.
    pub flip_rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub answer_format: AnswerFormat,
    /// In `reason_then_answer` mode, probability that a yes/no verdict contradicts the
    /// rationale written before it. Ignored in `answer_then_reason` mode.
    #[serde(default)]
    pub inconsistency_rate: f64,
}

impl MockAnnotatorConfig {
    pub fn noise_free(seed: u64) -> Self {
        MockAnnotatorConfig {
            flip_rate: 0.0,
            seed,
            answer_format: AnswerFormat::AnswerThenReason,
            inconsistency_rate: 0.0,
        }
    }

    pub fn with_flip_rate(mut self, flip_rate: f64) -> Self {
        self.flip_rate = flip_rate;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("flip_rate", self.flip_rate),
            ("inconsistency_rate", self.inconsistency_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// What the mock decided for a request, before rendering text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockTrace {
    /// Literal answers the mock believes, in sub-question order (empty for multi-choice).
    pub sub_answers: Vec<(String, Answer)>,
    /// Verdict implied by `sub_answers` (binary VQA and classification only).
    pub reasoned_verdict: Option<Answer>,
    /// Verdict actually emitted; differs from `reasoned_verdict` iff an inconsistency was injected.
    pub verdict: Option<Answer>,
    pub injected_inconsistency: bool,
    /// Issues selected in a multi-choice answer.
    pub selected_issues: Vec<String>,
}

struct MockVideo {
    overlay_text: String,
    hashtags: Vec<String>,
    latent: LatentTruth,
}

/// Deterministic annotator that answers from synthetic latent truth with independent
/// per-sub-question flips. Output is a pure function of `(config, request)`.
pub struct MockAnnotator {
    config: MockAnnotatorConfig,
    guidelines: Arc<GuidelineSet>,
    videos: HashMap<String, MockVideo>,
}

const CAPTION_OPENERS: [&str; 3] = ["The video shows", "The clip features", "This short video presents"];

impl MockAnnotator {
    /// Records without latent truth are ignored; requests about them fail.
    pub fn new(
        config: MockAnnotatorConfig,
        guidelines: Arc<GuidelineSet>,
        videos: &[VideoRecord],
    ) -> Result<Self, String> {
        config.validate()?;
        let videos = videos
            .iter()
            .filter_map(|v| {
                let latent = v.latent_truth.clone()?;
                Some((
                    v.video_id.clone(),
                    MockVideo {
                        overlay_text: v.overlay_text.clone(),
                        hashtags: v.hashtags.clone(),
                        latent,
                    },
                ))
            })
            .collect();
        Ok(MockAnnotator {
            config,
            guidelines,
            videos,
        })
    }

    pub fn config(&self) -> &MockAnnotatorConfig {
        &self.config
    }

    fn video(&self, video_id: &str) -> Result<&MockVideo, AnnotatorError> {
        self.videos
            .get(video_id)
            .ok_or_else(|| AnnotatorError::protocol(format!("no latent truth for video `{video_id}`")))
    }

    fn issue(&self, issue_id: &str) -> Result<&IssueSpec, AnnotatorError> {
        self.guidelines
            .issue(issue_id)
            .ok_or_else(|| AnnotatorError::protocol(format!("unknown issue `{issue_id}`")))
    }

    /// Violation indicator the mock reports for one sub-question: latent truth, flipped
    /// with probability `flip_rate`. Shared by every task so that one annotator pass is
    /// self-consistent.
    pub fn believed_violation(&self, video_id: &str, issue_id: &str, subq_id: &str) -> Result<bool, AnnotatorError> {
        let video = self.video(video_id)?;
        let truth = video
            .latent
            .get(issue_id)
            .and_then(|m| m.get(subq_id))
            .copied()
            .unwrap_or(false);
        let draw = unit_interval(keyed_hash(
            self.config.seed,
            &[b"flip", video_id.as_bytes(), issue_id.as_bytes(), subq_id.as_bytes()],
        ));
        Ok(truth != (draw < self.config.flip_rate))
    }

    fn believed_answers(&self, video_id: &str, issue: &IssueSpec) -> Result<Vec<(String, Answer)>, AnnotatorError> {
        issue
            .sub_questions
            .iter()
            .map(|q| {
                let v = self.believed_violation(video_id, &issue.issue_id, &q.subq_id)?;
                Ok((q.subq_id.clone(), q.answer_for(v)))
            })
            .collect()
    }

    fn issue_verdict(issue: &IssueSpec, answers: &[(String, Answer)]) -> Answer {
        let violations: BTreeMap<String, bool> = answers
            .iter()
            .map(|(id, a)| {
                let q = issue.sub_question(id).expect("answer ids come from the issue");
                (id.clone(), q.is_violation(*a))
            })
            .collect();
        Answer::from_bool(issue.label_from_violations(&violations).is_positive())
    }

    fn maybe_inject(&self, request: &AnnotationRequest, reasoned: Answer) -> (Answer, bool) {
        if self.config.answer_format != AnswerFormat::ReasonThenAnswer || self.config.inconsistency_rate <= 0.0 {
            return (reasoned, false);
        }
        let key = request.content_key();
        let draw = unit_interval(keyed_hash(self.config.seed, &[b"inconsistent", key.as_bytes()]));
        if draw < self.config.inconsistency_rate {
            (reasoned.flipped(), true)
        } else {
            (reasoned, false)
        }
    }

    /// The decisions behind the response to `request`.
    pub fn trace(&self, request: &AnnotationRequest) -> Result<MockTrace, AnnotatorError> {
        let route = request
            .route
            .as_ref()
            .ok_or_else(|| AnnotatorError::protocol("mock backend needs a routed request"))?;
        let mut trace = MockTrace {
            sub_answers: Vec::new(),
            reasoned_verdict: None,
            verdict: None,
            injected_inconsistency: false,
            selected_issues: Vec::new(),
        };
        match route {
            RequestRoute::Caption { video_id, issue_id, .. } => {
                trace.sub_answers = self.believed_answers(video_id, self.issue(issue_id)?)?;
            }
            RequestRoute::BinaryVqa {
                video_id,
                issue_id,
                subq_id,
            } => {
                let issue = self.issue(issue_id)?;
                let q = issue
                    .sub_question(subq_id)
                    .ok_or_else(|| AnnotatorError::protocol(format!("unknown sub-question `{subq_id}`")))?;
                let answer = q.answer_for(self.believed_violation(video_id, issue_id, subq_id)?);
                trace.sub_answers = vec![(subq_id.clone(), answer)];
                let (verdict, injected) = self.maybe_inject(request, answer);
                trace.reasoned_verdict = Some(answer);
                trace.verdict = Some(verdict);
                trace.injected_inconsistency = injected;
            }
            RequestRoute::MultiChoice { video_id, issue_ids } => {
                for issue_id in issue_ids {
                    let issue = self.issue(issue_id)?;
                    let answers = self.believed_answers(video_id, issue)?;
                    if Self::issue_verdict(issue, &answers).is_yes() {
                        trace.selected_issues.push(issue_id.clone());
                    }
                }
            }
            RequestRoute::Classify { video_id, issue_id } => {
                let issue = self.issue(issue_id)?;
                trace.sub_answers = self.believed_answers(video_id, issue)?;
                let reasoned = Self::issue_verdict(issue, &trace.sub_answers);
                let (verdict, injected) = self.maybe_inject(request, reasoned);
                trace.reasoned_verdict = Some(reasoned);
                trace.verdict = Some(verdict);
                trace.injected_inconsistency = injected;
            }
        }
        Ok(trace)
    }

    fn with_verdict(&self, verdict: &str, rationale: &str) -> String {
        match self.config.answer_format {
            AnswerFormat::AnswerThenReason => format!("{verdict}. {rationale}"),
            AnswerFormat::ReasonThenAnswer => format!("{rationale} Final answer: {verdict}."),
        }
    }

    fn logits(&self, request: &AnnotationRequest, verdict: Answer) -> LabelLogits {
        let key = request.content_key();
        let jitter = |tag: &[u8]| unit_interval(keyed_hash(self.config.seed, &[tag, key.as_bytes()])) - 0.5;
        let (chosen, other) = (2.0 + jitter(b"logit-chosen"), -2.0 + jitter(b"logit-other"));
        match verdict {
            Answer::Yes => LabelLogits { yes: chosen, no: other },
            Answer::No => LabelLogits { yes: other, no: chosen },
        }
    }

    fn render(&self, request: &AnnotationRequest, trace: &MockTrace) -> Result<String, AnnotatorError> {
        let route = request.route.as_ref().expect("trace checked the route");
        let text = match route {
            RequestRoute::Caption {
                video_id,
                issue_id,
                variant,
            } => {
                let video = self.video(video_id)?;
                let issue = self.issue(issue_id)?;
                let opener = CAPTION_OPENERS[*variant as usize % CAPTION_OPENERS.len()];
                let cues: Vec<String> = trace
                    .sub_answers
                    .iter()
                    .filter_map(|(id, a)| {
                        let q = issue.sub_question(id)?;
                        q.is_violation(*a).then(|| q.primary_cue())
                    })
                    .collect();
                let first = if video.hashtags.is_empty() {
                    format!("{opener} {}.", video.overlay_text)
                } else {
                    format!(
                        "{opener} {} with hashtags {}.",
                        video.overlay_text,
                        video.hashtags.join(" ")
                    )
                };
                let second = if cues.is_empty() {
                    format!("Regarding {}, no relevant signals are visible.", issue.title)
                } else {
                    format!("Regarding {}, it contains {}.", issue.title, cues.join(" and "))
                };
                format!("{first} {second}")
            }
            RequestRoute::BinaryVqa { issue_id, subq_id, .. } => {
                let q = self.issue(issue_id)?.sub_question(subq_id).expect("checked in trace");
                let (_, answer) = trace.sub_answers[0];
                let verdict = trace.verdict.expect("binary trace has a verdict");
                self.with_verdict(verdict.token(), &rationale_sentence(q, answer))
            }
            RequestRoute::MultiChoice { issue_ids, .. } => {
                if trace.selected_issues.is_empty() {
                    let none = format!("{}. None of the above", option_letter(issue_ids.len()));
                    let rationale = "The video does not violate any of the listed policies.";
                    match self.config.answer_format {
                        AnswerFormat::AnswerThenReason => format!("{none}. {rationale}"),
                        AnswerFormat::ReasonThenAnswer => format!("{rationale} Final answer: None of the above."),
                    }
                } else {
                    let letters: Vec<String> = trace
                        .selected_issues
                        .iter()
                        .map(|id| {
                            let idx = issue_ids.iter().position(|i| i == id).expect("selected from list");
                            option_letter(idx).to_string()
                        })
                        .collect();
                    let titles: Vec<&str> = trace
                        .selected_issues
                        .iter()
                        .map(|id| self.guidelines.issue(id).map_or(id.as_str(), |i| i.title.as_str()))
                        .collect();
                    let rationale = format!("The video violates the {} policy.", titles.join(" and "));
                    self.with_verdict(&letters.join(", "), &rationale)
                }
            }
            RequestRoute::Classify { issue_id, .. } => {
                let issue = self.issue(issue_id)?;
                let rationale: Vec<String> = trace
                    .sub_answers
                    .iter()
                    .map(|(id, a)| rationale_sentence(issue.sub_question(id).expect("from issue"), *a))
                    .collect();
                let verdict = trace.verdict.expect("classify trace has a verdict");
                self.with_verdict(verdict.token(), &rationale.join(" "))
            }
        };
        Ok(text)
    }
}

/// "The video shows X." for a yes answer, "The video does not show X." for no.
fn rationale_sentence(q: &SubQuestion, answer: Answer) -> String {
    match answer {
        Answer::Yes => format!("The video shows {}.", q.primary_cue()),
        Answer::No => format!("The video does not show {}.", q.primary_cue()),
    }
}

impl Backend for MockAnnotator {
    fn backend_id(&self) -> String {
        format!("mock(seed={},flip_rate={})", self.config.seed, self.config.flip_rate)
    }

    fn call(&self, request: &AnnotationRequest) -> Result<AnnotationResponse, AnnotatorError> {
        let trace = self.trace(request)?;
        let text = self.render(request, &trace)?;
        let label_logits = match (request.want_label_logits, trace.verdict) {
            (true, Some(v)) => Some(self.logits(request, v)),
            _ => None,
        };
        Ok(AnnotationResponse {
            text,
            label_logits,
            latency_ms: 0,
        })
    }
}
