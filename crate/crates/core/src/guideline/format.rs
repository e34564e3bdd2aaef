//! Line-oriented guideline file format.
//!
//! ```text
//! # comment lines start with '#'
//! version: 2025-06
//!
//! issue: ssc
//! title: sexually suggestive content
//! guideline: |
//!   Adult Image-Based Sexual Abuse occurs when the subject(s) depicted ...
//!   (block lines are indented by two spaces)
//! clause: Exposure of private body parts is a violation.
//!   maps_to: [exposed]
//! subq: exposed
//!   text: Are private body parts exposed?
//!   polarity: yes_is_violation
//!   cue: private body parts
//! aggregation: any_positive
//! ```
//!
//! Top-level keys start in column 1; `maps_to`, `text`, `polarity` and `cue` are indented
//! under the preceding `clause` or `subq`. `polarity` defaults to `yes_is_violation`,
//! `cue` may repeat, and `aggregation` (`any_positive`, `all_positive`, or `k_of_n <k>`)
//! defaults to `any_positive`. An empty `maps_to: []` is accepted and reported by
//! [`validate_decomposition`](super::validate_decomposition) as an uncovered clause.

use super::{AggregationRule, GuidelineClause, GuidelineError, GuidelineSet, IssueSpec, Polarity, SubQuestion};
use indexmap::IndexMap;
use std::fmt::Write;

struct Line<'a> {
    number: usize,
    indent: usize,
    key: &'a str,
    value: &'a str,
    value_col: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> GuidelineError {
    GuidelineError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

fn split_line(number: usize, raw: &str) -> Result<Line<'_>, GuidelineError> {
    let indent = raw.len() - raw.trim_start().len();
    let body = &raw[indent..];
    let colon = body
        .find(':')
        .ok_or_else(|| syntax(number, indent + 1, "expected `key: value`"))?;
    let key = &body[..colon];
    if key.is_empty() || !key.bytes().all(|b| b.is_ascii_lowercase() || b == b'_') {
        return Err(syntax(number, indent + 1, format!("invalid key `{key}`")));
    }
    let rest = &body[colon + 1..];
    let lead = rest.len() - rest.trim_start().len();
    Ok(Line {
        number,
        indent,
        key,
        value: rest.trim(),
        value_col: indent + colon + 2 + lead,
    })
}

struct ClauseDraft {
    line: usize,
    text: String,
    maps_to: Option<Vec<String>>,
}

struct SubqDraft {
    line: usize,
    id: String,
    text: Option<String>,
    polarity: Option<Polarity>,
    cues: Vec<String>,
}

struct IssueDraft {
    line: usize,
    id: String,
    title: Option<String>,
    guideline: Option<String>,
    clauses: Vec<ClauseDraft>,
    subqs: Vec<SubqDraft>,
    aggregation: Option<AggregationRule>,
}

enum Scope {
    None,
    Clause,
    Subq,
}

fn set_once<T>(slot: &mut Option<T>, value: T, line: &Line) -> Result<(), GuidelineError> {
    if slot.is_some() {
        return Err(syntax(
            line.number,
            line.indent + 1,
            format!("duplicate `{}` entry", line.key),
        ));
    }
    *slot = Some(value);
    Ok(())
}

fn parse_list(line: &Line) -> Result<Vec<String>, GuidelineError> {
    let v = line.value;
    if !(v.starts_with('[') && v.ends_with(']')) {
        return Err(syntax(line.number, line.value_col, "expected a list like `[a, b]`"));
    }
    let inner = v[1..v.len() - 1].trim();
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|item| {
            let item = item.trim();
            if item.is_empty() {
                Err(syntax(line.number, line.value_col, "empty list item"))
            } else {
                Ok(item.to_owned())
            }
        })
        .collect()
}

fn parse_aggregation(line: &Line) -> Result<AggregationRule, GuidelineError> {
    let mut parts = line.value.split_whitespace();
    let rule = match (parts.next(), parts.next(), parts.next()) {
        (Some("any_positive"), None, None) => AggregationRule::AnyPositive,
        (Some("all_positive"), None, None) => AggregationRule::AllPositive,
        (Some("k_of_n"), Some(k), None) => {
            let k = k
                .parse()
                .map_err(|_| syntax(line.number, line.value_col, format!("invalid k `{k}` for k_of_n")))?;
            AggregationRule::KOfN { k }
        }
        _ => {
            return Err(syntax(
                line.number,
                line.value_col,
                format!("unknown aggregation `{}`", line.value),
            ))
        }
    };
    Ok(rule)
}

fn parse_polarity(line: &Line) -> Result<Polarity, GuidelineError> {
    match line.value {
        "yes_is_violation" => Ok(Polarity::YesIsViolation),
        "no_is_violation" => Ok(Polarity::NoIsViolation),
        other => Err(syntax(
            line.number,
            line.value_col,
            format!("unknown polarity `{other}`"),
        )),
    }
}

/// Parses a guideline document. Errors carry 1-based line (and, for syntax errors, column)
/// numbers.
pub fn parse_guideline_set(document: &str) -> Result<GuidelineSet, GuidelineError> {
    let lines: Vec<&str> = document.lines().collect();
    let mut version: Option<String> = None;
    let mut issues: Vec<IssueDraft> = Vec::new();
    let mut scope = Scope::None;
    let mut i = 0;

    while i < lines.len() {
        let number = i + 1;
        let raw = lines[i].trim_end();
        i += 1;
        let trimmed = raw.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let line = split_line(number, raw)?;

        if line.indent > 0 {
            let issue = issues.last_mut();
            match (&scope, issue) {
                (Scope::Clause, Some(issue)) => {
                    let clause = issue.clauses.last_mut().expect("clause scope");
                    match line.key {
                        "maps_to" => set_once(&mut clause.maps_to, parse_list(&line)?, &line)?,
                        other => {
                            return Err(syntax(
                                number,
                                line.indent + 1,
                                format!("unexpected `{other}` under clause"),
                            ))
                        }
                    }
                }
                (Scope::Subq, Some(issue)) => {
                    let subq = issue.subqs.last_mut().expect("subq scope");
                    match line.key {
                        "text" => set_once(&mut subq.text, line.value.to_owned(), &line)?,
                        "polarity" => set_once(&mut subq.polarity, parse_polarity(&line)?, &line)?,
                        "cue" => {
                            if line.value.is_empty() {
                                return Err(syntax(number, line.value_col, "empty cue"));
                            }
                            subq.cues.push(line.value.to_owned());
                        }
                        other => {
                            return Err(syntax(
                                number,
                                line.indent + 1,
                                format!("unexpected `{other}` under subq"),
                            ))
                        }
                    }
                }
                _ => return Err(syntax(number, 1, "indented entry outside a clause or subq block")),
            }
            continue;
        }

        scope = Scope::None;
        if line.key == "version" {
            if !issues.is_empty() {
                return Err(syntax(number, 1, "`version` must precede all issues"));
            }
            set_once(&mut version, line.value.to_owned(), &line)?;
            continue;
        }
        if line.key == "issue" {
            issues.push(IssueDraft {
                line: number,
                id: line.value.to_owned(),
                title: None,
                guideline: None,
                clauses: Vec::new(),
                subqs: Vec::new(),
                aggregation: None,
            });
            continue;
        }
        let issue = issues
            .last_mut()
            .ok_or_else(|| syntax(number, 1, format!("`{}` appears before any `issue`", line.key)))?;
        match line.key {
            "title" => set_once(&mut issue.title, line.value.to_owned(), &line)?,
            "guideline" => {
                let text = if line.value == "|" {
                    let mut block: Vec<&str> = Vec::new();
                    while i < lines.len() {
                        let next = lines[i].trim_end();
                        if next.is_empty() {
                            block.push("");
                        } else if let Some(stripped) = next.strip_prefix("  ") {
                            block.push(stripped);
                        } else {
                            break;
                        }
                        i += 1;
                    }
                    while block.last() == Some(&"") {
                        block.pop();
                    }
                    block.join("\n")
                } else {
                    line.value.to_owned()
                };
                set_once(&mut issue.guideline, text, &line)?;
            }
            "clause" => {
                if line.value.is_empty() {
                    return Err(syntax(number, line.value_col, "clause text is empty"));
                }
                issue.clauses.push(ClauseDraft {
                    line: number,
                    text: line.value.to_owned(),
                    maps_to: None,
                });
                scope = Scope::Clause;
            }
            "subq" => {
                issue.subqs.push(SubqDraft {
                    line: number,
                    id: line.value.to_owned(),
                    text: None,
                    polarity: None,
                    cues: Vec::new(),
                });
                scope = Scope::Subq;
            }
            "aggregation" => set_once(&mut issue.aggregation, parse_aggregation(&line)?, &line)?,
            other => return Err(syntax(number, 1, format!("unknown key `{other}`"))),
        }
    }

    let version = version.ok_or_else(|| GuidelineError::validation(None, "missing `version` entry"))?;
    if issues.is_empty() {
        return Err(GuidelineError::validation(None, "guideline set contains no issues"));
    }

    let mut map: IndexMap<String, IssueSpec> = IndexMap::new();
    for draft in issues {
        let line = Some(draft.line);
        let title = draft
            .title
            .ok_or_else(|| GuidelineError::validation(line, format!("issue `{}` has no title", draft.id)))?;
        let guideline_text = draft
            .guideline
            .ok_or_else(|| GuidelineError::validation(line, format!("issue `{}` has no guideline", draft.id)))?;
        let mut sub_questions = Vec::with_capacity(draft.subqs.len());
        for s in draft.subqs {
            let text = s.text.ok_or_else(|| {
                GuidelineError::validation(Some(s.line), format!("sub-question `{}` has no text", s.id))
            })?;
            sub_questions.push(SubQuestion {
                subq_id: s.id,
                question_text: text,
                polarity: s.polarity.unwrap_or_default(),
                cues: s.cues,
            });
        }
        let mut clauses = Vec::with_capacity(draft.clauses.len());
        for c in draft.clauses {
            let maps_to = c
                .maps_to
                .ok_or_else(|| GuidelineError::validation(Some(c.line), "clause has no `maps_to` entry"))?;
            if let Some(missing) = maps_to
                .iter()
                .find(|id| !sub_questions.iter().any(|q| &q.subq_id == *id))
            {
                return Err(GuidelineError::validation(
                    Some(c.line),
                    format!("clause references undefined sub-question `{missing}`"),
                ));
            }
            clauses.push(GuidelineClause { text: c.text, maps_to });
        }
        let spec = IssueSpec {
            issue_id: draft.id,
            title,
            guideline_text,
            clauses,
            sub_questions,
            aggregation: draft.aggregation.unwrap_or_default(),
        };
        spec.check(line)?;
        if map.contains_key(&spec.issue_id) {
            return Err(GuidelineError::validation(
                line,
                format!("duplicate issue id `{}`", spec.issue_id),
            ));
        }
        map.insert(spec.issue_id.clone(), spec);
    }
    Ok(GuidelineSet { version, issues: map })
}

/// Writes `set` in the format accepted by [`parse_guideline_set`].
pub fn serialize_guideline_set(set: &GuidelineSet) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "version: {}", set.version);
    for issue in set.iter() {
        out.push('\n');
        let _ = writeln!(out, "issue: {}", issue.issue_id);
        let _ = writeln!(out, "title: {}", issue.title);
        let g = &issue.guideline_text;
        if g.contains('\n') || g.trim() == "|" || g.trim() != g {
            out.push_str("guideline: |\n");
            for l in g.lines() {
                if l.is_empty() {
                    out.push('\n');
                } else {
                    let _ = writeln!(out, "  {l}");
                }
            }
        } else {
            let _ = writeln!(out, "guideline: {g}");
        }
        for c in &issue.clauses {
            let _ = writeln!(out, "clause: {}", c.text);
            let _ = writeln!(out, "  maps_to: [{}]", c.maps_to.join(", "));
        }
        for q in &issue.sub_questions {
            let _ = writeln!(out, "subq: {}", q.subq_id);
            let _ = writeln!(out, "  text: {}", q.question_text);
            let _ = writeln!(out, "  polarity: {}", q.polarity.as_str());
            for cue in &q.cues {
                let _ = writeln!(out, "  cue: {cue}");
            }
        }
        let _ = writeln!(out, "aggregation: {}", issue.aggregation);
    }
    out
}
