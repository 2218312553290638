use std::collections::HashMap;
use std::io::BufRead;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::prompt::{count_tokens, Prompt};
use super::QaError;
use crate::rules::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub completion_tokens: usize,
    /// Provider-reported prompt tokens, when known.
    pub prompt_tokens: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("no scripted pattern matched the prompt")]
    NoMatch,
    #[error("client configuration: {0}")]
    Config(String),
    #[error("request failed: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Response(String),
}

/// Generates an answer for a prompt built for `query_id`.
pub trait AnswerClient: Send + Sync {
    fn complete(&self, query_id: &str, prompt: &Prompt) -> Result<Completion, QaError>;

    /// Identifies the client in run reports.
    fn describe(&self) -> String;
}

/// One pre-computed answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub query_id: String,
    pub path: Path,
    pub answer_text: String,
    #[serde(default)]
    pub prompt_tokens: Option<usize>,
    #[serde(default)]
    pub completion_tokens: Option<usize>,
}

/// Returns fixture answers keyed by (query id, path).
#[derive(Debug, Clone, Default)]
pub struct ReplayClient {
    answers: HashMap<(String, Path), ReplayRecord>,
}

impl ReplayClient {
    pub fn new(records: impl IntoIterator<Item = ReplayRecord>) -> Result<Self, QaError> {
        let mut answers = HashMap::new();
        for r in records {
            let key = (r.query_id.clone(), r.path);
            if answers.insert(key, r.clone()).is_some() {
                return Err(QaError::Fixture {
                    line: 0,
                    reason: format!("duplicate answer for ({}, {})", r.query_id, r.path),
                });
            }
        }
        Ok(Self { answers })
    }

    /// Reads line-delimited replay records.
    pub fn from_reader(reader: impl BufRead) -> Result<Self, QaError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| QaError::Fixture {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| QaError::Fixture {
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
        Self::new(records)
    }

    pub fn answer_for(&self, query_id: &str, path: Path) -> Option<&ReplayRecord> {
        self.answers.get(&(query_id.to_string(), path))
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

impl AnswerClient for ReplayClient {
    fn complete(&self, query_id: &str, prompt: &Prompt) -> Result<Completion, QaError> {
        let rec = self
            .answer_for(query_id, prompt.path)
            .ok_or_else(|| QaError::MissingFixture {
                query_id: query_id.to_string(),
                path: prompt.path,
            })?;
        Ok(Completion {
            completion_tokens: rec.completion_tokens.unwrap_or_else(|| count_tokens(&rec.answer_text)),
            prompt_tokens: rec.prompt_tokens,
            text: rec.answer_text.clone(),
        })
    }

    fn describe(&self) -> String {
        format!("replay({} answers)", self.answers.len())
    }
}

/// Answers with the first pattern that matches the prompt's user text.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClient {
    script: Vec<(Regex, String)>,
}

impl ScriptedClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, pattern: &str, answer: impl Into<String>) -> Result<Self, regex::Error> {
        self.script.push((Regex::new(pattern)?, answer.into()));
        Ok(self)
    }
}

impl AnswerClient for ScriptedClient {
    fn complete(&self, _query_id: &str, prompt: &Prompt) -> Result<Completion, QaError> {
        let text = self
            .script
            .iter()
            .find(|(re, _)| re.is_match(&prompt.user_text))
            .map(|(_, a)| a.clone())
            .ok_or(QaError::Client(ClientError::NoMatch))?;
        Ok(Completion {
            completion_tokens: count_tokens(&text),
            prompt_tokens: None,
            text,
        })
    }

    fn describe(&self) -> String {
        format!("scripted({} patterns)", self.script.len())
    }
}
