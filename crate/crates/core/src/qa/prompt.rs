use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::QaError;
use crate::retrieval::EvidenceBundle;
use crate::rules::Path;

pub const BUILTIN_PROMPTS: &str = include_str!("../../assets/prompts.json");

/// Whitespace token count. Additive over space-joined concatenation.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathTemplate {
    pub system: String,
}

/// Prompt texts, loaded from a JSON asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub version: u64,
    pub paths: BTreeMap<String, PathTemplate>,
    pub question_header: String,
    pub passages_header: String,
    pub facts_header: String,
    pub immutability_instruction: String,
    #[serde(default)]
    pub route_agent_system: String,
    #[serde(default)]
    pub score_agent_system: String,
    #[serde(default)]
    pub expert_system: String,
    #[serde(default)]
    pub judge_system: String,
}

impl PromptTemplates {
    pub fn from_json(text: &str) -> Result<Self, QaError> {
        serde_json::from_str(text).map_err(|e| QaError::Templates(e.to_string()))
    }

    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_PROMPTS).expect("bundled prompts parse")
    }

    /// System text for `path`; DB and Hybrid always carry the
    /// do-not-alter instruction for injected facts.
    pub fn system_for(&self, path: Path) -> Result<String, QaError> {
        let base = &self
            .paths
            .get(path.as_str())
            .ok_or(QaError::TemplateMissing(path))?
            .system;
        Ok(match path {
            Path::Db | Path::Hybrid => format!("{base}\n{}", self.immutability_instruction),
            Path::Doc | Path::Llm => base.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub path: Path,
    pub system_text: String,
    pub user_text: String,
    pub token_count: usize,
}

/// Question first, then passages, then fact renderings.
pub fn build_prompt(query: &str, bundle: &EvidenceBundle, templates: &PromptTemplates) -> Result<Prompt, QaError> {
    let system_text = templates.system_for(bundle.path)?;
    let mut user_text = format!("{} {}", templates.question_header, query.trim());
    if !bundle.passages.is_empty() {
        user_text.push_str(&format!("\n\n{}", templates.passages_header));
        for (i, p) in bundle.passages.iter().enumerate() {
            user_text.push_str(&format!("\n[{}] ({}) {}", i + 1, p.doc_id, p.text));
        }
    }
    if !bundle.facts.is_empty() {
        user_text.push_str(&format!("\n\n{}", templates.facts_header));
        for f in &bundle.facts {
            user_text.push_str(&format!("\n[table {}]\n{}", f.table_id, f.rendered));
        }
    }
    let token_count = count_tokens(&system_text) + count_tokens(&user_text);
    Ok(Prompt {
        path: bundle.path,
        system_text,
        user_text,
        token_count,
    })
}
