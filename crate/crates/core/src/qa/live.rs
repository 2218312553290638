use std::time::Duration;

use serde_json::{json, Value};

use super::client::{AnswerClient, ClientError, Completion};
use super::prompt::{Prompt, PromptTemplates};
use super::QaError;
use crate::evolution::{EvolutionError, ExpertClient};
use crate::retrieval::TextGenerator;
use crate::rules::{Judge, JudgeError};

pub const ENV_BASE_URL: &str = "PATHROUTE_API_BASE";
pub const ENV_MODEL: &str = "PATHROUTE_MODEL";
pub const ENV_API_KEY: &str = "PATHROUTE_API_KEY";
const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

/// Chat-completion client for any OpenAI-compatible endpoint.
#[derive(Clone)]
pub struct LiveClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    templates: PromptTemplates,
}

impl LiveClient {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            agent,
            templates: PromptTemplates::builtin(),
        }
    }

    /// Reads the endpoint, model and key from the environment.
    pub fn from_env() -> Result<Self, ClientError> {
        let model = std::env::var(ENV_MODEL).map_err(|_| ClientError::Config(format!("{ENV_MODEL} is not set")))?;
        let base = std::env::var(ENV_BASE_URL).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Ok(Self::new(base, model, std::env::var(ENV_API_KEY).ok()))
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    /// One deterministic (temperature 0) chat turn.
    pub fn chat(&self, system: &str, user: &str) -> Result<Completion, ClientError> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let mut req = self.agent.post(format!("{}/chat/completions", self.base_url));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Response(format!("status {status}: {e}")))?;
        if !status.is_success() {
            return Err(ClientError::Transport(format!("status {status}: {value}")));
        }
        let text = value["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| ClientError::Response(format!("no message content in {value}")))?
            .trim()
            .to_string();
        let usage = |k: &str| value["usage"][k].as_u64().map(|n| n as usize);
        Ok(Completion {
            completion_tokens: usage("completion_tokens").unwrap_or_else(|| super::count_tokens(&text)),
            prompt_tokens: usage("prompt_tokens"),
            text,
        })
    }
}

impl AnswerClient for LiveClient {
    fn complete(&self, _query_id: &str, prompt: &Prompt) -> Result<Completion, QaError> {
        self.chat(&prompt.system_text, &prompt.user_text)
            .map_err(QaError::Client)
    }

    fn describe(&self) -> String {
        format!("live({} @ {})", self.model, self.base_url)
    }
}

impl TextGenerator for LiveClient {
    fn generate(&self, prompt: &str) -> Result<String, String> {
        self.chat("You are a careful data assistant.", prompt)
            .map(|c| c.text)
            .map_err(|e| e.to_string())
    }
}

impl ExpertClient for LiveClient {
    fn propose(&self, ruleset_doc: &str, report_text: &str) -> Result<String, EvolutionError> {
        let user = format!("Current rule file:\n{ruleset_doc}\n\nDiagnostics report:\n{report_text}");
        self.chat(&self.templates.expert_system, &user)
            .map(|c| c.text)
            .map_err(|e| EvolutionError::ExpertClient(e.to_string()))
    }
}

impl Judge for LiveClient {
    fn judge(&self, query: &str, predicate: &str) -> Result<bool, JudgeError> {
        let user = format!("Question: {query}\nStatement: {predicate}");
        let reply = self
            .chat(&self.templates.judge_system, &user)
            .map_err(|e| JudgeError(e.to_string()))?;
        match reply.text.trim().trim_end_matches('.').to_ascii_lowercase().as_str() {
            "yes" => Ok(true),
            "no" => Ok(false),
            other => Err(JudgeError(format!("expected yes or no, got {other:?}"))),
        }
    }
}
