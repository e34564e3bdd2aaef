//! Prompt templates with `{issue_title}`, `{question_text}` and `{options_block}` placeholders.

use crate::answer::option_letter;
use crate::guideline::{IssueSpec, SubQuestion};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("placeholder {{{0}}} is not bound")]
    UnboundPlaceholder(String),
    #[error("unknown placeholder {{{placeholder}}} in {kind} template")]
    UnknownPlaceholder { kind: TemplateKind, placeholder: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The prompt a template renders. The four pretraining task kinds plus the zero-shot
/// classification prompt used at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Caption,
    VqaBinary,
    VqaMulti,
    Cot,
    ZeroShot,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::Caption,
        TemplateKind::VqaBinary,
        TemplateKind::VqaMulti,
        TemplateKind::Cot,
        TemplateKind::ZeroShot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::Caption => "caption",
            TemplateKind::VqaBinary => "vqa_binary",
            TemplateKind::VqaMulti => "vqa_multi",
            TemplateKind::Cot => "cot",
            TemplateKind::ZeroShot => "zero_shot",
        }
    }

    /// File name inside a templates directory.
    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }

    fn default_text(self) -> &'static str {
        match self {
            TemplateKind::Caption => "Describe the video regarding the {issue_title} issue.",
            TemplateKind::VqaBinary => {
                "Regarding the {issue_title} issue: {question_text} Answer \"Yes\" or \"No\" first, then explain."
            }
            TemplateKind::VqaMulti => {
                "Which of the following issues does the video violate? Select all that apply.\n{options_block}\nAnswer with the option letters first, then explain."
            }
            TemplateKind::Cot => {
                "Does the video violate the {issue_title} policy? Go through every sub-question step by step, then give the final conclusion."
            }
            TemplateKind::ZeroShot => {
                "Does the video violate the {issue_title} policy? Answer \"Yes\" or \"No\", and explain your reasoning."
            }
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const PLACEHOLDERS: [&str; 3] = ["issue_title", "question_text", "options_block"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: TemplateKind,
    pub template_text: String,
}

/// Values available to a template. Missing values make their placeholder unbound.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptArgs<'a> {
    pub issue: Option<&'a IssueSpec>,
    pub subq: Option<&'a SubQuestion>,
    pub options: Option<&'a [&'a IssueSpec]>,
}

/// Yields `(byte_offset, name)` for each `{identifier}` in `text`. Other braces are literal.
fn placeholders(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.match_indices('{').filter_map(move |(start, _)| {
        let rest = &text[start + 1..];
        let end = rest.find('}')?;
        let name = &rest[..end];
        let ident = !name.is_empty() && name.bytes().all(|b| b.is_ascii_lowercase() || b == b'_');
        ident.then_some((start, name))
    })
}

/// Lettered option list: one line per issue, then a final "None of the above".
pub fn options_block(issues: &[&IssueSpec]) -> String {
    let mut lines: Vec<String> = issues
        .iter()
        .enumerate()
        .map(|(i, issue)| format!("{}. {}", option_letter(i), issue.title))
        .collect();
    lines.push(format!("{}. None of the above", option_letter(issues.len())));
    lines.join("\n")
}

impl PromptTemplate {
    pub fn new(task: TemplateKind, template_text: impl Into<String>) -> Result<Self, PromptError> {
        let template = PromptTemplate {
            task,
            template_text: template_text.into(),
        };
        if let Some((_, name)) = placeholders(&template.template_text).find(|(_, n)| !PLACEHOLDERS.contains(n)) {
            return Err(PromptError::UnknownPlaceholder {
                kind: task,
                placeholder: name.to_owned(),
            });
        }
        Ok(template)
    }

    pub fn default_for(task: TemplateKind) -> Self {
        PromptTemplate {
            task,
            template_text: task.default_text().to_owned(),
        }
    }

    pub fn render(&self, args: PromptArgs<'_>) -> Result<String, PromptError> {
        let text = &self.template_text;
        let mut out = String::with_capacity(text.len() + 64);
        let mut cursor = 0;
        for (start, name) in placeholders(text) {
            let value = match name {
                "issue_title" => args.issue.map(|i| i.title.clone()),
                "question_text" => args.subq.map(|q| q.question_text.clone()),
                "options_block" => args.options.map(options_block),
                _ => None,
            }
            .ok_or_else(|| PromptError::UnboundPlaceholder(name.to_owned()))?;
            out.push_str(&text[cursor..start]);
            out.push_str(&value);
            cursor = start + name.len() + 2;
        }
        out.push_str(&text[cursor..]);
        Ok(out)
    }
}

/// Renders `template` for one issue and optional sub-question.
pub fn render_prompt(
    template: &PromptTemplate,
    issue: &IssueSpec,
    subq: Option<&SubQuestion>,
) -> Result<String, PromptError> {
    template.render(PromptArgs {
        issue: Some(issue),
        subq,
        options: None,
    })
}

/// One template per [`TemplateKind`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: [PromptTemplate; 5],
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            templates: TemplateKind::ALL.map(PromptTemplate::default_for),
        }
    }
}

impl TemplateSet {
    /// Loads `<kind>.txt` for every kind from `dir`. A trailing newline is dropped.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = TemplateSet::default();
        for (slot, kind) in set.templates.iter_mut().zip(TemplateKind::ALL) {
            let path = dir.join(kind.file_name());
            let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io { path, source })?;
            *slot = PromptTemplate::new(kind, text.trim_end_matches(['\n', '\r']))?;
        }
        Ok(set)
    }

    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for t in &self.templates {
            std::fs::write(dir.join(t.task.file_name()), format!("{}\n", t.template_text))?;
        }
        Ok(())
    }

    pub fn get(&self, kind: TemplateKind) -> &PromptTemplate {
        &self.templates[kind as usize]
    }

    pub fn set(&mut self, template: PromptTemplate) {
        let idx = template.task as usize;
        self.templates[idx] = template;
    }
}
