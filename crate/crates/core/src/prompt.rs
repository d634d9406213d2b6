//! Prompt templates for both stages, one per task type.
//!
//! Placeholders: `{question}`, `{options}`, `{frame_width}`, `{frame_height}`
//! and `{region_side}`. `{{` and `}}` produce literal braces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Frame;
use crate::rewards::{Stage, TaskType};

pub const PLACEHOLDERS: [&str; 5] = ["question", "options", "frame_width", "frame_height", "region_side"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("template for {stage}/{task} uses unknown placeholder `{name}`")]
    UnknownPlaceholder { stage: &'static str, task: &'static str, name: String },
    #[error("template for {stage}/{task} is missing `{{{name}}}`")]
    MissingPlaceholder { stage: &'static str, task: &'static str, name: &'static str },
    #[error("template for {stage}/{task} has an unbalanced brace")]
    Unbalanced { stage: &'static str, task: &'static str },
    #[error("no template for {stage}/{task}")]
    NoTemplate { stage: &'static str, task: &'static str },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplates {
    pub gse: BTreeMap<TaskType, String>,
    pub lpr: BTreeMap<TaskType, String>,
}

const GSE_FORMAT: &str = "The image is {frame_width}x{frame_height} pixels. First reason inside <think></think>, \
then answer with a single JSON object {{\"region\": [x_min, y_min, x_max, y_max], \"response\": ...}} \
where region is a {region_side}x{region_side} square that contains the target.";

const LPR_FORMAT: &str = "The image is a {frame_width}x{frame_height} crop. First reason inside <think></think>, \
then answer with a single JSON object {{\"bbox\": [x_min, y_min, x_max, y_max], \"points_1\": [x, y], \
\"points_2\": [x, y], \"response\": ...}} where the box tightly bounds the target and both points lie on it.";

fn task_line(task: TaskType) -> &'static str {
    match task {
        TaskType::Is => "Instruction: {question}\nIn the response, say \"<object> is found\" if you see it.",
        TaskType::Mvqa => "Question: {question}\nOptions:\n{options}\nIn the response, give the option letter.",
        TaskType::Ovqa => "Question: {question}\nIn the response, answer in a few words.",
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        let build = |fmt: &str| TaskType::ALL.into_iter().map(|t| (t, format!("{}\n{}", task_line(t), fmt))).collect();
        Self { gse: build(GSE_FORMAT), lpr: build(LPR_FORMAT) }
    }
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn tokenize(t: &str) -> Option<Vec<Piece<'_>>> {
    let mut out = Vec::new();
    let mut rest = t;
    while !rest.is_empty() {
        let i = rest.find(['{', '}']).unwrap_or(rest.len());
        if i > 0 {
            out.push(Piece::Text(&rest[..i]));
            rest = &rest[i..];
            continue;
        }
        if let Some(r) = rest.strip_prefix("{{") {
            out.push(Piece::Text("{"));
            rest = r;
        } else if let Some(r) = rest.strip_prefix("}}") {
            out.push(Piece::Text("}"));
            rest = r;
        } else if rest.starts_with('}') {
            return None;
        } else {
            let end = rest.find('}')?;
            let name = &rest[1..end];
            if name.contains('{') {
                return None;
            }
            out.push(Piece::Slot(name));
            rest = &rest[end + 1..];
        }
    }
    Some(out)
}

/// Values substituted into a template.
pub struct PromptVars<'a> {
    pub question: &'a str,
    pub options: Option<&'a [String]>,
    pub frame: Frame,
    pub region_side: u32,
}

/// Options rendered one per line as `A. text`.
pub fn format_options(options: &[String]) -> String {
    options.iter().zip('A'..='Z').map(|(o, l)| format!("{l}. {o}")).collect::<Vec<_>>().join("\n")
}

impl PromptTemplates {
    fn table(&self, stage: Stage) -> &BTreeMap<TaskType, String> {
        match stage {
            Stage::Gse => &self.gse,
            Stage::Lpr => &self.lpr,
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for stage in [Stage::Gse, Stage::Lpr] {
            for task in TaskType::ALL {
                let (s, t) = (stage.as_str(), task.as_str());
                let tpl = self.table(stage).get(&task).ok_or(PromptError::NoTemplate { stage: s, task: t })?;
                let pieces = tokenize(tpl).ok_or(PromptError::Unbalanced { stage: s, task: t })?;
                let slots: Vec<&str> = pieces
                    .iter()
                    .filter_map(|p| match p {
                        Piece::Slot(n) => Some(*n),
                        Piece::Text(_) => None,
                    })
                    .collect();
                if let Some(bad) = slots.iter().find(|n| !PLACEHOLDERS.contains(n)) {
                    return Err(PromptError::UnknownPlaceholder { stage: s, task: t, name: bad.to_string() });
                }
                let mut required = vec!["question"];
                if task == TaskType::Mvqa {
                    required.push("options");
                }
                if let Some(name) = required.into_iter().find(|r| !slots.contains(r)) {
                    return Err(PromptError::MissingPlaceholder { stage: s, task: t, name });
                }
            }
        }
        Ok(())
    }

    pub fn render(&self, stage: Stage, task: TaskType, vars: &PromptVars<'_>) -> Result<String, PromptError> {
        let (s, t) = (stage.as_str(), task.as_str());
        let tpl = self.table(stage).get(&task).ok_or(PromptError::NoTemplate { stage: s, task: t })?;
        let pieces = tokenize(tpl).ok_or(PromptError::Unbalanced { stage: s, task: t })?;
        let mut out = String::with_capacity(tpl.len() + vars.question.len());
        for p in pieces {
            match p {
                Piece::Text(x) => out.push_str(x),
                Piece::Slot("question") => out.push_str(vars.question),
                Piece::Slot("options") => out.push_str(&format_options(vars.options.unwrap_or(&[]))),
                Piece::Slot("frame_width") => out.push_str(&vars.frame.width().to_string()),
                Piece::Slot("frame_height") => out.push_str(&vars.frame.height().to_string()),
                Piece::Slot("region_side") => out.push_str(&vars.region_side.to_string()),
                Piece::Slot(other) => {
                    return Err(PromptError::UnknownPlaceholder { stage: s, task: t, name: other.to_string() })
                }
            }
        }
        Ok(out)
    }
}
