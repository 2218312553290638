//! Prompt assembly and answer generation for each augmentation path.

mod client;
mod live;
mod prompt;

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use client::{AnswerClient, ClientError, Completion, ReplayClient, ReplayRecord, ScriptedClient};
pub use live::{LiveClient, ENV_API_KEY, ENV_BASE_URL, ENV_MODEL};
pub use prompt::{build_prompt, count_tokens, PathTemplate, Prompt, PromptTemplates, BUILTIN_PROMPTS};

use crate::retrieval::{EvidenceBundle, KnowledgeBase, RetrievalConfig, RetrievalError};
use crate::rules::Path;

#[derive(Debug, thiserror::Error)]
pub enum QaError {
    #[error("no prompt template for path {0}")]
    TemplateMissing(Path),
    #[error("prompt templates: {0}")]
    Templates(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("replay fixture has no answer for ({query_id}, {path})")]
    MissingFixture { query_id: String, path: Path },
    #[error("replay fixture line {line}: {reason}")]
    Fixture { line: usize, reason: String },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query_id: String,
    /// The path the caller asked for.
    pub path: Path,
    /// The path whose prompt was actually answered.
    pub answered_path: Path,
    pub answer_text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub generation_latency: Duration,
    /// Retrieval for `path` failed in part or in full.
    pub degraded: bool,
}

/// Sends `prompt` to `client`, timing the call.
pub fn answer(query_id: &str, prompt: &Prompt, client: &dyn AnswerClient) -> Result<AnswerRecord, QaError> {
    let start = Instant::now();
    let c = client.complete(query_id, prompt)?;
    Ok(AnswerRecord {
        query_id: query_id.to_string(),
        path: prompt.path,
        answered_path: prompt.path,
        answer_text: c.text,
        prompt_tokens: prompt.token_count,
        completion_tokens: c.completion_tokens,
        generation_latency: start.elapsed(),
        degraded: false,
    })
}

/// Retrieval, prompt assembly and generation for one path.
pub struct QaPipeline {
    kb: Arc<KnowledgeBase>,
    templates: PromptTemplates,
    config: RetrievalConfig,
}

/// A prompt and the answer it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaOutcome {
    pub prompt: Prompt,
    pub answer: AnswerRecord,
}

impl QaPipeline {
    pub fn new(kb: Arc<KnowledgeBase>, templates: PromptTemplates, config: RetrievalConfig) -> Self {
        Self { kb, templates, config }
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn knowledge_base(&self) -> &Arc<KnowledgeBase> {
        &self.kb
    }

    /// Builds the prompt for `path`. When retrieval fails outright, returns
    /// the direct-LLM prompt with `degraded` set.
    pub fn prepare(&self, query: &str, path: Path) -> Result<(Prompt, bool), QaError> {
        let (bundle, degraded) = match self.kb.gather_evidence(path, query, &self.config) {
            Ok(b) => {
                let d = b.degraded;
                (b, d)
            }
            Err(e) => {
                log::debug!("{path} retrieval failed, answering directly: {e}");
                (EvidenceBundle::empty(Path::Llm), true)
            }
        };
        Ok((build_prompt(query, &bundle, &self.templates)?, degraded))
    }

    pub fn run(
        &self,
        query_id: &str,
        query: &str,
        path: Path,
        client: &dyn AnswerClient,
    ) -> Result<QaOutcome, QaError> {
        let (prompt, degraded) = self.prepare(query, path)?;
        let mut answer = answer(query_id, &prompt, client)?;
        answer.path = path;
        answer.degraded = degraded;
        Ok(QaOutcome { prompt, answer })
    }
}
