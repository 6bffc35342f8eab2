//! Model-family prompt templates and `$PLACEHOLDER$` rendering.
//!
//! A template file is a TOML front-matter block between `---` lines followed
//! by the prompt body. The body may reference `$TASK_DESCRIPTION$`,
//! `$CONTEXT$`, `$JSON$` and `$EXAMPLE$`. `$EXAMPLE$` expands to the
//! template's `example_body` (which itself may reference
//! `$EXAMPLE_QUESTION$`, `$EXPLANATION$` and `$JSON$`) in chain-of-thought
//! mode, and to nothing in instruction mode. Substitution is single-pass:
//! inserted values are never rescanned.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{ContextWindow, WindowRef};

pub const BODY_PLACEHOLDERS: &[&str] = &["TASK_DESCRIPTION", "CONTEXT", "JSON", "EXAMPLE"];
pub const EXAMPLE_PLACEHOLDERS: &[&str] = &["EXAMPLE_QUESTION", "EXPLANATION", "JSON"];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateFamily {
    Llama2,
    Alpaca,
    Vicuna,
    Custom,
}

impl fmt::Display for TemplateFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Llama2 => "llama2",
            Self::Alpaca => "alpaca",
            Self::Vicuna => "vicuna",
            Self::Custom => "custom",
        })
    }
}

impl std::str::FromStr for TemplateFamily {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "llama2" | "llama-2" | "llama2-style" => Ok(Self::Llama2),
            "alpaca" | "alpaca-style" => Ok(Self::Alpaca),
            "vicuna" | "vicuna-style" => Ok(Self::Vicuna),
            "custom" => Ok(Self::Custom),
            other => Err(PromptError::UnknownFamily(other.to_string())),
        }
    }
}

/// Instruction prompting or chain-of-thought prompting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Ip,
    Cot,
}

/// Worked example carrying the reasoning steps shown to the model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotExemplar {
    pub question: String,
    pub explanation: String,
}

impl CotExemplar {
    fn is_empty(&self) -> bool {
        self.question.trim().is_empty() || self.explanation.trim().is_empty()
    }
}

/// JSON keys holding the identification flag and the disease name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKeys {
    pub identification: String,
    pub disease: String,
}

impl Default for AnswerKeys {
    fn default() -> Self {
        Self {
            identification: "answer".into(),
            disease: "disease".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub family: TemplateFamily,
    pub mode: PromptMode,
    pub task_description: String,
    pub json_exemplar: String,
    #[serde(default)]
    pub example_body: String,
    #[serde(default)]
    pub answer_keys: AnswerKeys,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot_exemplar: Option<CotExemplar>,
    #[serde(skip)]
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub template_id: String,
    pub window_ref: WindowRef,
    pub content_hash: String,
}

/// A problem found by [`validate_template`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UndeclaredPlaceholder { name: String, in_example: bool },
    MissingCotExemplar,
    CotWithoutExampleSlot,
    UnparsableJsonExemplar(String),
    JsonExemplarMissingKey(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::UndeclaredPlaceholder { name, in_example } => {
                let place = if *in_example { "example_body" } else { "body" };
                write!(f, "undeclared placeholder {name} in {place}")
            }
            Self::MissingCotExemplar => f.write_str("missing cot_exemplar"),
            Self::CotWithoutExampleSlot => f.write_str("cot mode body does not reference $EXAMPLE$"),
            Self::UnparsableJsonExemplar(e) => write!(f, "unparsable json_exemplar: {e}"),
            Self::JsonExemplarMissingKey(k) => write!(f, "json_exemplar lacks key `{k}`"),
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown placeholder(s): {}", .0.join(", "))]
    UnknownPlaceholder(Vec<String>),
    #[error("no value for placeholder {0}")]
    MissingValue(String),
    #[error("window text is empty")]
    EmptyWindow,
    #[error("unknown template family `{0}`")]
    UnknownFamily(String),
    #[error("template file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A `$NAME$` occurrence: byte range of the whole token and the name.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Placeholder<'a> {
    start: usize,
    end: usize,
    name: &'a str,
}

fn scan_placeholders(text: &str) -> Vec<Placeholder<'_>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'$' {
            i += 1;
            continue;
        }
        let name_start = i + 1;
        let mut j = name_start;
        while j < bytes.len() && (bytes[j].is_ascii_uppercase() || bytes[j].is_ascii_digit() || bytes[j] == b'_') {
            j += 1;
        }
        let well_formed = j > name_start && bytes[name_start].is_ascii_uppercase() && j < bytes.len() && bytes[j] == b'$';
        if well_formed {
            out.push(Placeholder {
                start: i,
                end: j + 1,
                name: &text[name_start..j],
            });
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Names of all `$NAME$` placeholders in `text`, in order of appearance.
pub fn placeholder_names(text: &str) -> Vec<String> {
    scan_placeholders(text).into_iter().map(|p| p.name.to_string()).collect()
}

/// Replaces every placeholder in one pass. Names absent from `values` are
/// reported; inserted values are not rescanned.
fn substitute(text: &str, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let found = scan_placeholders(text);
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for p in found {
        let value = values.get(p.name).ok_or_else(|| PromptError::MissingValue(p.name.to_string()))?;
        out.push_str(&text[last..p.start]);
        out.push_str(value);
        last = p.end;
    }
    out.push_str(&text[last..]);
    Ok(out)
}

fn undeclared(text: &str, allowed: &[&str]) -> Vec<String> {
    let mut names: Vec<String> = scan_placeholders(text)
        .into_iter()
        .filter(|p| !allowed.contains(&p.name))
        .map(|p| p.name.to_string())
        .collect();
    names.sort();
    names.dedup();
    names
}

/// Hex SHA-256 of a prompt text.
pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl PromptTemplate {
    /// Parses a template file: TOML front matter between `---` lines, then the body.
    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let rest = source
            .strip_prefix("---\n")
            .or_else(|| source.strip_prefix("---\r\n"))
            .ok_or_else(|| PromptError::Format("missing opening `---` line".into()))?;
        let (front, body) = split_front_matter(rest).ok_or_else(|| PromptError::Format("missing closing `---` line".into()))?;
        let mut template: PromptTemplate = toml::from_str(front).map_err(|e| PromptError::Format(e.to_string()))?;
        template.body = body.to_string();
        Ok(template)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Serializes back into the on-disk format.
    pub fn to_file_string(&self) -> String {
        let front = toml::to_string(self).expect("template front matter serializes");
        format!("---\n{front}---\n{}", self.body)
    }

    pub fn with_mode(mut self, mode: PromptMode) -> Self {
        self.mode = mode;
        self
    }

    fn example_block(&self) -> Result<String, PromptError> {
        match self.mode {
            PromptMode::Ip => Ok(String::new()),
            PromptMode::Cot => {
                let ex = self
                    .cot_exemplar
                    .as_ref()
                    .filter(|e| !e.is_empty())
                    .ok_or_else(|| PromptError::MissingValue("EXAMPLE".into()))?;
                let unknown = undeclared(&self.example_body, EXAMPLE_PLACEHOLDERS);
                if !unknown.is_empty() {
                    return Err(PromptError::UnknownPlaceholder(unknown));
                }
                let values = BTreeMap::from([
                    ("EXAMPLE_QUESTION", ex.question.clone()),
                    ("EXPLANATION", ex.explanation.clone()),
                    ("JSON", self.json_exemplar.clone()),
                ]);
                substitute(&self.example_body, &values)
            }
        }
    }
}

fn split_front_matter(rest: &str) -> Option<(&str, &str)> {
    let mut offset = 0;
    for line in rest.split_inclusive('\n') {
        if line.trim_end_matches(['\r', '\n']) == "---" {
            return Some((&rest[..offset], &rest[offset + line.len()..]));
        }
        offset += line.len();
    }
    None
}

/// Renders `template` for `window`.
pub fn render_prompt(template: &PromptTemplate, window: &ContextWindow) -> Result<RenderedPrompt, PromptError> {
    if window.text.trim().is_empty() {
        return Err(PromptError::EmptyWindow);
    }
    let unknown = undeclared(&template.body, BODY_PLACEHOLDERS);
    if !unknown.is_empty() {
        return Err(PromptError::UnknownPlaceholder(unknown));
    }
    let mut values = BTreeMap::from([
        ("TASK_DESCRIPTION", template.task_description.clone()),
        ("CONTEXT", window.text.clone()),
        ("JSON", template.json_exemplar.clone()),
    ]);
    if template.body.contains("$EXAMPLE$") {
        values.insert("EXAMPLE", template.example_block()?);
    }
    let text = substitute(&template.body, &values)?;
    Ok(RenderedPrompt {
        content_hash: content_hash(&text),
        text,
        template_id: template.id.clone(),
        window_ref: window.window_ref(),
    })
}

/// Checks a template without rendering it. Violations are returned as data.
pub fn validate_template(template: &PromptTemplate) -> Result<(), Vec<Violation>> {
    let mut violations: Vec<Violation> = undeclared(&template.body, BODY_PLACEHOLDERS)
        .into_iter()
        .map(|name| Violation::UndeclaredPlaceholder { name, in_example: false })
        .collect();
    violations.extend(
        undeclared(&template.example_body, EXAMPLE_PLACEHOLDERS)
            .into_iter()
            .map(|name| Violation::UndeclaredPlaceholder { name, in_example: true }),
    );
    if template.mode == PromptMode::Cot {
        if template.cot_exemplar.as_ref().is_none_or(CotExemplar::is_empty) {
            violations.push(Violation::MissingCotExemplar);
        }
        if !template.body.contains("$EXAMPLE$") {
            violations.push(Violation::CotWithoutExampleSlot);
        }
    }
    match serde_json::from_str::<serde_json::Value>(&template.json_exemplar) {
        Ok(serde_json::Value::Object(map)) => {
            for key in [&template.answer_keys.identification, &template.answer_keys.disease] {
                if !map.contains_key(key) {
                    violations.push(Violation::JsonExemplarMissingKey(key.clone()));
                }
            }
        }
        Ok(_) => violations.push(Violation::UnparsableJsonExemplar("not a JSON object".into())),
        Err(e) => violations.push(Violation::UnparsableJsonExemplar(e.to_string())),
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

const BUILTIN_SOURCES: [&str; 3] = [
    include_str!("../templates/llama2.md"),
    include_str!("../templates/alpaca.md"),
    include_str!("../templates/vicuna.md"),
];

/// The bundled chain-of-thought templates, one per supported family.
pub fn builtin_templates() -> BTreeMap<TemplateFamily, PromptTemplate> {
    BUILTIN_SOURCES
        .iter()
        .map(|src| PromptTemplate::parse(src).expect("bundled template parses"))
        .map(|t| (t.family.clone(), t))
        .collect()
}
