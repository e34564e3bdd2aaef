//! Issue definitions and their hand-authored sub-question decompositions.
//!
//! A [`GuidelineSet`] is immutable once built and can be shared freely across threads.
//! Files are read with [`parse_guideline_set`] and written back with
//! [`serialize_guideline_set`]; the grammar is documented in [`format`].

pub mod format;

use crate::{Answer, Label};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;

pub use format::{parse_guideline_set, serialize_guideline_set};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GuidelineError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("validation error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Validation { line: Option<usize>, message: String },
}

impl GuidelineError {
    pub(crate) fn validation(line: Option<usize>, message: impl Into<String>) -> Self {
        GuidelineError::Validation {
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AggregateError {
    #[error("no answer given for sub-question `{0}`")]
    MissingAnswer(String),
    #[error("answer given for unknown sub-question `{0}`")]
    UnknownAnswer(String),
}

/// Which literal answer to a sub-question signals a violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    YesIsViolation,
    NoIsViolation,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::YesIsViolation => "yes_is_violation",
            Polarity::NoIsViolation => "no_is_violation",
        }
    }
}

/// How sub-question violation indicators combine into an issue label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregationRule {
    /// Positive when at least one sub-question signals a violation.
    #[default]
    AnyPositive,
    AllPositive,
    KOfN {
        k: usize,
    },
}

impl AggregationRule {
    /// Applies the rule to `violations` out of `total` sub-questions.
    pub fn decide(self, violations: usize, total: usize) -> bool {
        match self {
            AggregationRule::AnyPositive => violations >= 1,
            AggregationRule::AllPositive => total > 0 && violations == total,
            AggregationRule::KOfN { k } => violations >= k,
        }
    }
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationRule::AnyPositive => f.write_str("any_positive"),
            AggregationRule::AllPositive => f.write_str("all_positive"),
            AggregationRule::KOfN { k } => write!(f, "k_of_n {k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestion {
    pub subq_id: String,
    pub question_text: String,
    #[serde(default)]
    pub polarity: Polarity,
    /// Phrases whose presence in a rationale means the question is answered "yes".
    /// The first one is used when rendering text; all are used when reading it back.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cues: Vec<String>,
}

impl SubQuestion {
    pub fn new(subq_id: &str, question_text: &str) -> Self {
        SubQuestion {
            subq_id: subq_id.to_owned(),
            question_text: question_text.to_owned(),
            polarity: Polarity::YesIsViolation,
            cues: Vec::new(),
        }
    }

    pub fn with_polarity(mut self, polarity: Polarity) -> Self {
        self.polarity = polarity;
        self
    }

    pub fn with_cue(mut self, cue: &str) -> Self {
        self.cues.push(cue.to_owned());
        self
    }

    /// Whether `answer` signals a violation under this question's polarity.
    pub fn is_violation(&self, answer: Answer) -> bool {
        match self.polarity {
            Polarity::YesIsViolation => answer.is_yes(),
            Polarity::NoIsViolation => !answer.is_yes(),
        }
    }

    /// The literal answer that corresponds to a violation indicator.
    pub fn answer_for(&self, violating: bool) -> Answer {
        match self.polarity {
            Polarity::YesIsViolation => Answer::from_bool(violating),
            Polarity::NoIsViolation => Answer::from_bool(!violating),
        }
    }

    /// Explicit cues, or one derived from the question text when none were authored.
    pub fn cue_phrases(&self) -> Vec<String> {
        if self.cues.is_empty() {
            vec![derive_cue(&self.question_text)]
        } else {
            self.cues.clone()
        }
    }

    pub fn primary_cue(&self) -> String {
        self.cues
            .first()
            .cloned()
            .unwrap_or_else(|| derive_cue(&self.question_text))
    }
}

/// "Are private body parts exposed?" -> "private body parts exposed".
fn derive_cue(question: &str) -> String {
    const AUXILIARIES: &[&str] = &[
        "is", "are", "does", "do", "did", "has", "have", "was", "were", "can", "will",
    ];
    let lowered = question.trim().trim_end_matches('?').to_lowercase();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    if words.len() > 1 && AUXILIARIES.contains(&words[0]) {
        words.remove(0);
        if words.len() > 1 && words[0] == "there" {
            words.remove(0);
        }
    }
    words.join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineClause {
    pub text: String,
    pub maps_to: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueSpec {
    pub issue_id: String,
    pub title: String,
    pub guideline_text: String,
    pub clauses: Vec<GuidelineClause>,
    pub sub_questions: Vec<SubQuestion>,
    #[serde(default)]
    pub aggregation: AggregationRule,
}

impl IssueSpec {
    pub fn sub_question(&self, subq_id: &str) -> Option<&SubQuestion> {
        self.sub_questions.iter().find(|q| q.subq_id == subq_id)
    }

    /// Label implied by `answers` under this issue's rule and polarities.
    pub fn aggregate(&self, answers: &BTreeMap<String, Answer>) -> Result<Label, AggregateError> {
        aggregate(answers, self.aggregation, &self.sub_questions)
    }

    /// Label implied by per-sub-question violation indicators (missing ids count as clean).
    pub fn label_from_violations(&self, violations: &BTreeMap<String, bool>) -> Label {
        let hits = self
            .sub_questions
            .iter()
            .filter(|q| violations.get(&q.subq_id).copied().unwrap_or(false))
            .count();
        Label::from_violation(self.aggregation.decide(hits, self.sub_questions.len()))
    }

    /// Checks the structural invariants that parsing enforces. `line` is attached to errors.
    pub fn check(&self, line: Option<usize>) -> Result<(), GuidelineError> {
        if !is_identifier(&self.issue_id) {
            return Err(GuidelineError::validation(
                line,
                format!("issue id `{}` must match [a-z0-9_]+", self.issue_id),
            ));
        }
        if self.sub_questions.is_empty() {
            return Err(GuidelineError::validation(
                line,
                format!("issue `{}` has no sub-questions", self.issue_id),
            ));
        }
        let mut seen = HashSet::new();
        for q in &self.sub_questions {
            if !is_identifier(&q.subq_id) {
                return Err(GuidelineError::validation(
                    line,
                    format!("sub-question id `{}` must match [a-z0-9_]+", q.subq_id),
                ));
            }
            if !seen.insert(q.subq_id.as_str()) {
                return Err(GuidelineError::validation(
                    line,
                    format!("duplicate sub-question id `{}` in issue `{}`", q.subq_id, self.issue_id),
                ));
            }
            if !q.question_text.trim_end().ends_with('?') {
                return Err(GuidelineError::validation(
                    line,
                    format!("sub-question `{}` text must end with `?`", q.subq_id),
                ));
            }
        }
        for clause in &self.clauses {
            if let Some(missing) = clause.maps_to.iter().find(|id| !seen.contains(id.as_str())) {
                return Err(GuidelineError::validation(
                    line,
                    format!(
                        "clause in issue `{}` references undefined sub-question `{missing}`",
                        self.issue_id
                    ),
                ));
            }
        }
        if let AggregationRule::KOfN { k } = self.aggregation {
            if k == 0 || k > self.sub_questions.len() {
                return Err(GuidelineError::validation(
                    line,
                    format!(
                        "k_of_n k={k} out of range 1..={} for issue `{}`",
                        self.sub_questions.len(),
                        self.issue_id
                    ),
                ));
            }
        }
        Ok(())
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineSet {
    pub version: String,
    pub issues: IndexMap<String, IssueSpec>,
}

impl GuidelineSet {
    /// Builds a validated set, keeping the given issue order.
    pub fn new(version: &str, issues: Vec<IssueSpec>) -> Result<Self, GuidelineError> {
        if issues.is_empty() {
            return Err(GuidelineError::validation(None, "guideline set contains no issues"));
        }
        let mut map = IndexMap::with_capacity(issues.len());
        for issue in issues {
            issue.check(None)?;
            if map.contains_key(&issue.issue_id) {
                return Err(GuidelineError::validation(
                    None,
                    format!("duplicate issue id `{}`", issue.issue_id),
                ));
            }
            map.insert(issue.issue_id.clone(), issue);
        }
        Ok(GuidelineSet {
            version: version.to_owned(),
            issues: map,
        })
    }

    pub fn issue(&self, issue_id: &str) -> Option<&IssueSpec> {
        self.issues.get(issue_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &IssueSpec> {
        self.issues.values()
    }

    pub fn len(&self) -> usize {
        self.issues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Combines literal answers into a label.
///
/// `answers` must cover exactly the ids in `sub_questions`.
pub fn aggregate(
    answers: &BTreeMap<String, Answer>,
    rule: AggregationRule,
    sub_questions: &[SubQuestion],
) -> Result<Label, AggregateError> {
    if let Some(unknown) = answers
        .keys()
        .find(|id| !sub_questions.iter().any(|q| &q.subq_id == *id))
    {
        return Err(AggregateError::UnknownAnswer(unknown.clone()));
    }
    let mut hits = 0;
    for q in sub_questions {
        let answer = answers
            .get(&q.subq_id)
            .ok_or_else(|| AggregateError::MissingAnswer(q.subq_id.clone()))?;
        if q.is_violation(*answer) {
            hits += 1;
        }
    }
    Ok(Label::from_violation(rule.decide(hits, sub_questions.len())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    UncoveredClause,
    UnreferencedSubQuestion,
    DuplicateQuestionText,
}

/// A decomposition warning. Never fatal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub issue_id: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "warning[{}]: {}", self.issue_id, self.message)
    }
}

/// Reports coverage gaps in an issue's decomposition.
pub fn validate_decomposition(spec: &IssueSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let warn = |kind, message: String| Diagnostic {
        kind,
        issue_id: spec.issue_id.clone(),
        message,
    };
    for (idx, clause) in spec.clauses.iter().enumerate() {
        if clause.maps_to.is_empty() {
            out.push(warn(
                DiagnosticKind::UncoveredClause,
                format!(
                    "uncovered clause #{}: \"{}\" maps to no sub-question",
                    idx + 1,
                    truncate(&clause.text, 60)
                ),
            ));
        }
    }
    for q in &spec.sub_questions {
        if !spec.clauses.iter().any(|c| c.maps_to.contains(&q.subq_id)) {
            out.push(warn(
                DiagnosticKind::UnreferencedSubQuestion,
                format!("sub-question `{}` is referenced by no clause", q.subq_id),
            ));
        }
    }
    let mut seen: Vec<(&str, String)> = Vec::new();
    for q in &spec.sub_questions {
        let norm = q.question_text.trim().to_lowercase();
        if let Some((first, _)) = seen.iter().find(|(_, t)| *t == norm) {
            out.push(warn(
                DiagnosticKind::DuplicateQuestionText,
                format!("sub-questions `{first}` and `{}` have identical text", q.subq_id),
            ));
        } else {
            seen.push((&q.subq_id, norm));
        }
    }
    out
}

fn truncate(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        s.to_owned()
    } else {
        let cut: String = s.chars().take(max).collect();
        format!("{cut}...")
    }
}
