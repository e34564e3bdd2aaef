//! Reading yes/no answers and option letters out of free-text model responses.

use crate::{Answer, Label};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Where a response puts its verdict relative to its rationale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    #[default]
    AnswerThenReason,
    ReasonThenAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unparseable answer: {0:?}")]
pub struct UnparseableAnswer(pub String);

fn excerpt(text: &str) -> String {
    text.chars().take(80).collect()
}

fn yes_no_token(word: &str) -> Option<Answer> {
    let core = word.trim_matches(|c: char| !c.is_alphanumeric());
    if core.eq_ignore_ascii_case("yes") {
        Some(Answer::Yes)
    } else if core.eq_ignore_ascii_case("no") {
        Some(Answer::No)
    } else {
        None
    }
}

/// Splits `text` into (everything before the final sentence, final sentence).
fn split_last_sentence(text: &str) -> (&str, &str) {
    let body = text.trim_end().trim_end_matches(['.', '!', '?']);
    match body.rfind(['.', '!', '?', '\n']) {
        Some(pos) => (text[..=pos].trim(), body[pos + 1..].trim()),
        None => ("", body.trim()),
    }
}

/// Reads the literal Yes/No verdict and returns it with the remaining explanation.
pub fn parse_yes_no(text: &str, format: AnswerFormat) -> Result<(Answer, String), UnparseableAnswer> {
    let text = text.trim();
    let fail = || UnparseableAnswer(excerpt(text));
    match format {
        AnswerFormat::AnswerThenReason => {
            let end = text.find(char::is_whitespace).unwrap_or(text.len());
            let answer = yes_no_token(&text[..end]).ok_or_else(fail)?;
            Ok((answer, text[end..].trim().to_owned()))
        }
        AnswerFormat::ReasonThenAnswer => {
            let (before, last) = split_last_sentence(text);
            let answer = last.split_whitespace().rev().find_map(yes_no_token).ok_or_else(fail)?;
            Ok((answer, before.to_owned()))
        }
    }
}

/// Reads a violation verdict ("Yes" means the video violates the issue) plus explanation.
pub fn extract_answer(text: &str, format: AnswerFormat) -> Result<(Label, String), UnparseableAnswer> {
    let (answer, explanation) = parse_yes_no(text, format)?;
    Ok((Label::from_violation(answer.is_yes()), explanation))
}

/// Options picked in a multi-choice response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptionSelection {
    /// Zero-based indices of the selected issue options.
    pub selected: BTreeSet<usize>,
    pub none_of_the_above: bool,
    pub explanation: String,
}

/// Parses a lettered selection over `issue_count` options followed by a final
/// "None of the above" option.
pub fn parse_option_letters(
    text: &str,
    format: AnswerFormat,
    issue_count: usize,
) -> Result<OptionSelection, UnparseableAnswer> {
    let text = text.trim();
    let fail = || UnparseableAnswer(excerpt(text));
    let (verdict, explanation) = match format {
        AnswerFormat::AnswerThenReason => {
            let end = text.find(['.', '\n']).unwrap_or(text.len());
            (&text[..end], text[end..].trim_start_matches('.').trim())
        }
        AnswerFormat::ReasonThenAnswer => {
            let (before, last) = split_last_sentence(text);
            let verdict = last.rsplit(':').next().unwrap_or(last);
            (verdict, before)
        }
    };
    let lowered = verdict.trim().to_lowercase();
    let mut selection = OptionSelection {
        selected: BTreeSet::new(),
        none_of_the_above: false,
        explanation: explanation.to_owned(),
    };
    if lowered.starts_with("none of the above") {
        selection.none_of_the_above = true;
        return Ok(selection);
    }
    let none_letter = (b'a' + issue_count as u8) as char;
    for token in lowered.split([',', ' ', '/']).map(str::trim).filter(|t| !t.is_empty()) {
        if token == "and" {
            continue;
        }
        let core = token.trim_matches(|c: char| !c.is_alphanumeric());
        let mut chars = core.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            return Err(fail());
        };
        if c == none_letter {
            selection.none_of_the_above = true;
        } else if c.is_ascii_lowercase() && ((c as u8 - b'a') as usize) < issue_count {
            selection.selected.insert((c as u8 - b'a') as usize);
        } else {
            return Err(fail());
        }
    }
    match (selection.selected.is_empty(), selection.none_of_the_above) {
        (true, true) | (false, false) => Ok(selection),
        // Nothing selected, or "None of the above" alongside concrete options.
        _ => Err(fail()),
    }
}

/// Letter for option `index` (0 -> 'A').
pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}
