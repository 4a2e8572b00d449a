//! Question/answer template assets.
//!
//! Templates live in a plain text file (one per line, tab-separated tag,
//! question, answer pattern) so wording edits need no recompilation.  A
//! default set is embedded in the binary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AvqaError, Result};

/// The default template set.
pub const DEFAULT_TEMPLATES: &str = include_str!("../assets/templates.txt");

/// QA category of a template.  Time templates additionally carry the scope
/// their minutes refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    FuturePhase,
    FutureStep,
    FutureInstrument,
    Time,
}

impl Category {
    pub fn as_str(&self) -> &'static str {
        match self {
            Category::FuturePhase => "future-phase",
            Category::FutureStep => "future-step",
            Category::FutureInstrument => "future-instrument",
            Category::Time => "time",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScope {
    Phase,
    Step,
    Overall,
}

impl TimeScope {
    pub fn as_str(&self) -> &'static str {
        match self {
            TimeScope::Phase => "phase",
            TimeScope::Step => "step",
            TimeScope::Overall => "overall",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Template {
    pub category: Category,
    /// Present exactly when `category == Time`.
    pub scope: Option<TimeScope>,
    pub question: String,
    /// Answer pattern containing the `{answer}` slot.
    pub answer_pattern: String,
}

impl Template {
    /// Substitutes the gold label into the answer pattern.
    pub fn render(&self, answer: &str) -> String {
        self.answer_pattern.replace("{answer}", answer)
    }
}

fn parse_tag(tag: &str) -> Option<(Category, Option<TimeScope>)> {
    match tag {
        "future-phase" => Some((Category::FuturePhase, None)),
        "future-step" => Some((Category::FutureStep, None)),
        "future-instrument" => Some((Category::FutureInstrument, None)),
        "time:phase" => Some((Category::Time, Some(TimeScope::Phase))),
        "time:step" => Some((Category::Time, Some(TimeScope::Step))),
        "time:overall" => Some((Category::Time, Some(TimeScope::Overall))),
        _ => None,
    }
}

/// Parses template text.  `origin` names the source in error messages.
pub fn parse_templates(text: &str, origin: &Path) -> Result<Vec<Template>> {
    let mut templates = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = raw.splitn(3, '\t');
        let (tag, question, pattern) = match (parts.next(), parts.next(), parts.next()) {
            (Some(t), Some(q), Some(p)) => (t.trim(), q.trim(), p.trim()),
            _ => {
                return Err(AvqaError::Malformed {
                    what: "template",
                    path: origin.to_path_buf(),
                    line: idx + 1,
                    reason: "expected tag<TAB>question<TAB>answer pattern".to_string(),
                })
            }
        };
        let (category, scope) = parse_tag(tag).ok_or_else(|| AvqaError::Malformed {
            what: "template",
            path: origin.to_path_buf(),
            line: idx + 1,
            reason: format!("unknown tag {tag:?}"),
        })?;
        if !pattern.contains("{answer}") {
            return Err(AvqaError::Malformed {
                what: "template",
                path: origin.to_path_buf(),
                line: idx + 1,
                reason: "answer pattern lacks the {answer} slot".to_string(),
            });
        }
        templates.push(Template {
            category,
            scope,
            question: question.to_string(),
            answer_pattern: pattern.to_string(),
        });
    }
    if templates.is_empty() {
        return Err(AvqaError::config(format!(
            "template file {} defines no templates",
            origin.display()
        )));
    }
    Ok(templates)
}

/// Loads templates from a file, or the embedded defaults when `path` is None.
pub fn load_templates(path: Option<&Path>) -> Result<Vec<Template>> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| AvqaError::io(p, e))?;
            parse_templates(&text, p)
        }
        None => parse_templates(DEFAULT_TEMPLATES, Path::new("<built-in templates>")),
    }
}
