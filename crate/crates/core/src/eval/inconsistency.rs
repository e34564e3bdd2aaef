//! Checks whether a response's final answer agrees with its own rationale.
//!
//! The rationale is read by matching each sub-question's cue phrases in the explanation.
//! A cue mentioned plainly counts as a "yes" to its sub-question; a cue with a negation
//! word among the three words before it counts as "no". Sub-questions whose cues never
//! appear are taken as non-violating. When no cue appears at all the rationale is
//! indeterminate.

use crate::guideline::IssueSpec;
use crate::{Answer, Label};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consistency {
    Consistent,
    Inconsistent,
    Indeterminate,
}

const NEGATIONS: [&str; 7] = ["no", "not", "without", "never", "none", "nothing", "neither"];
const NEGATION_WINDOW: usize = 3;

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn is_negation(word: &str) -> bool {
    NEGATIONS.contains(&word) || word.ends_with("n't")
}

/// Literal answers the explanation gives, per sub-question it mentions.
pub fn read_rationale(explanation: &str, issue: &IssueSpec) -> BTreeMap<String, Answer> {
    let cues: Vec<(&str, Vec<String>)> = issue
        .sub_questions
        .iter()
        .flat_map(|q| {
            q.cue_phrases()
                .into_iter()
                .map(move |c| (q.subq_id.as_str(), words(&c)))
        })
        .filter(|(_, w)| !w.is_empty())
        .collect();
    let mut found = BTreeMap::new();
    for clause in explanation.split(['.', ';', '!', '?', '\n']) {
        let tokens = words(clause);
        for (subq, cue) in &cues {
            if cue.len() > tokens.len() {
                continue;
            }
            for start in 0..=tokens.len() - cue.len() {
                if tokens[start..start + cue.len()] != cue[..] {
                    continue;
                }
                let window = &tokens[start.saturating_sub(NEGATION_WINDOW)..start];
                let negated = window.iter().any(|w| is_negation(w));
                found.insert(subq.to_string(), Answer::from_bool(!negated));
            }
        }
    }
    found
}

/// Label the rationale supports, or `None` when it mentions no cue.
pub fn rationale_label(explanation: &str, issue: &IssueSpec) -> Option<Label> {
    let answers = read_rationale(explanation, issue);
    if answers.is_empty() {
        return None;
    }
    let violations = issue
        .sub_questions
        .iter()
        .map(|q| {
            let violating = answers.get(&q.subq_id).is_some_and(|a| q.is_violation(*a));
            (q.subq_id.clone(), violating)
        })
        .collect();
    Some(issue.label_from_violations(&violations))
}

pub fn detect_inconsistency(explanation: &str, final_label: Label, issue: &IssueSpec) -> Consistency {
    match rationale_label(explanation, issue) {
        None => Consistency::Indeterminate,
        Some(l) if l == final_label => Consistency::Consistent,
        Some(_) => Consistency::Inconsistent,
    }
}
