//! System and query-wrapper prompt assembly around retrieved context.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::schema_description;
use crate::index::RetrievalHit;

pub const SCHEMA_PLACEHOLDER: &str = "{schema}";
pub const CONTEXT_PLACEHOLDER: &str = "{context}";
pub const QUESTION_PLACEHOLDER: &str = "{question}";

/// Smallest accepted character budget for the user message.
pub const MIN_BUDGET_CHARS: usize = 512;
pub const DEFAULT_BUDGET_CHARS: usize = 12_000;

const CONTEXT_SEPARATOR: &str = "\n\n";

pub const DEFAULT_SYSTEM_PROMPT: &str = "\
You are an analyst's assistant that extracts political events from news passages.
Use ONLY the passages supplied in the user message; never add outside knowledge.

{schema}

Respond with the JSON array alone, with no prose before or after it.";

pub const DEFAULT_WRAPPER_PROMPT: &str = "\
Context passages, each introduced by its source tag:

{context}

Question: {question}

List the political events in the passages that answer the question, citing each event's source tags.";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template must contain {placeholder} exactly once (found {count})")]
    Placeholder {
        placeholder: &'static str,
        count: usize,
    },
    #[error("question is empty")]
    EmptyQuestion,
    #[error("no retrieved context to include")]
    NoContext,
    #[error("budget of {budget} chars is too small: {reason}")]
    Budget { budget: usize, reason: String },
    #[error("cannot read template {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    system_text: String,
    wrapper_text: String,
}

fn expect_once(text: &str, placeholder: &'static str) -> Result<(), PromptError> {
    match text.matches(placeholder).count() {
        1 => Ok(()),
        count => Err(PromptError::Placeholder { placeholder, count }),
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::new(DEFAULT_SYSTEM_PROMPT, DEFAULT_WRAPPER_PROMPT).expect("default templates are valid")
    }
}

impl PromptTemplate {
    pub fn new(system_text: impl Into<String>, wrapper_text: impl Into<String>) -> Result<Self, PromptError> {
        let system_text = system_text.into();
        let wrapper_text = wrapper_text.into();
        expect_once(&system_text, SCHEMA_PLACEHOLDER)?;
        expect_once(&wrapper_text, CONTEXT_PLACEHOLDER)?;
        expect_once(&wrapper_text, QUESTION_PLACEHOLDER)?;
        Ok(Self {
            system_text,
            wrapper_text,
        })
    }

    /// Loads either template from a plain-text file, falling back to the
    /// compiled-in default for the one not given.
    pub fn from_files(system: Option<&Path>, wrapper: Option<&Path>) -> Result<Self, PromptError> {
        let read = |path: &Path| {
            fs::read_to_string(path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let system_text = system.map(read).transpose()?;
        let wrapper_text = wrapper.map(read).transpose()?;
        Self::new(
            system_text.as_deref().unwrap_or(DEFAULT_SYSTEM_PROMPT),
            wrapper_text.as_deref().unwrap_or(DEFAULT_WRAPPER_PROMPT),
        )
    }

    pub fn system_text(&self) -> &str {
        &self.system_text
    }

    pub fn wrapper_text(&self) -> &str {
        &self.wrapper_text
    }
}

/// Substitutes each placeholder once, without rescanning inserted values.
fn fill(template: &str, substitutions: &[(&str, &str)]) -> String {
    let mut spots: Vec<(usize, &str, &str)> = substitutions
        .iter()
        .filter_map(|&(name, value)| template.find(name).map(|at| (at, name, value)))
        .collect();
    spots.sort_by_key(|&(at, _, _)| at);
    let mut out = String::with_capacity(template.len());
    let mut cursor = 0;
    for (at, name, value) in spots {
        out.push_str(&template[cursor..at]);
        out.push_str(value);
        cursor = at + name.len();
    }
    out.push_str(&template[cursor..]);
    out
}

/// One context passage as shown to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    /// `S1`, `S2`, … in score order.
    pub tag: String,
    pub chunk_id: String,
    pub text: String,
}

impl ContextEntry {
    fn block(&self) -> String {
        format!("[{}: {}] {}", self.tag, self.chunk_id, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub system: String,
    pub user: String,
    pub question: String,
    /// The included passages, best first.
    pub context: Vec<ContextEntry>,
}

impl AssembledPrompt {
    pub fn context_ids(&self) -> Vec<&str> {
        self.context.iter().map(|c| c.chunk_id.as_str()).collect()
    }
}

/// Builds the prompt pair. Hits are taken in the given (score) order and
/// appended while the user message stays within `budget_chars` characters;
/// the first hit that does not fit ends the context.
pub fn render(
    template: &PromptTemplate,
    question: &str,
    hits: &[RetrievalHit],
    budget_chars: usize,
) -> Result<AssembledPrompt, PromptError> {
    let question = question.trim();
    if question.is_empty() {
        return Err(PromptError::EmptyQuestion);
    }
    if budget_chars < MIN_BUDGET_CHARS {
        return Err(PromptError::Budget {
            budget: budget_chars,
            reason: format!("minimum is {MIN_BUDGET_CHARS}"),
        });
    }
    if hits.is_empty() {
        return Err(PromptError::NoContext);
    }

    let fixed_chars = template.wrapper_text.chars().count()
        - CONTEXT_PLACEHOLDER.len()
        - QUESTION_PLACEHOLDER.len()
        + question.chars().count();
    let separator_chars = CONTEXT_SEPARATOR.chars().count();

    let mut context = Vec::new();
    let mut blocks = Vec::new();
    let mut used = fixed_chars;
    for hit in hits {
        let entry = ContextEntry {
            tag: format!("S{}", context.len() + 1),
            chunk_id: hit.chunk_id.clone(),
            text: hit.text.clone(),
        };
        let block = entry.block();
        let extra = block.chars().count() + if blocks.is_empty() { 0 } else { separator_chars };
        if used + extra > budget_chars {
            break;
        }
        used += extra;
        blocks.push(block);
        context.push(entry);
    }
    if context.is_empty() {
        return Err(PromptError::Budget {
            budget: budget_chars,
            reason: "not even the top-ranked passage fits".into(),
        });
    }

    let context_text = blocks.join(CONTEXT_SEPARATOR);
    let user = fill(
        &template.wrapper_text,
        &[(CONTEXT_PLACEHOLDER, &context_text), (QUESTION_PLACEHOLDER, question)],
    );
    debug_assert_eq!(user.chars().count(), used);
    let system = fill(&template.system_text, &[(SCHEMA_PLACEHOLDER, &schema_description())]);
    Ok(AssembledPrompt {
        system,
        user,
        question: question.to_owned(),
        context,
    })
}
