use std::sync::Arc;

use crate::qa::PromptTemplates;
use crate::retrieval::TextGenerator;
use crate::router::{PathScorer, RouteError};
use crate::rules::{Path, PathScores, RuleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentMode {
    /// The model names one path; it scores 1, the rest 0.
    Choose,
    /// The model returns an integer score per path.
    Score,
}

/// Rule-free baseline scorer that asks a language model directly.
pub struct AgentScorer {
    model: Arc<dyn TextGenerator>,
    mode: AgentMode,
    system: String,
}

impl AgentScorer {
    pub fn new(model: Arc<dyn TextGenerator>, mode: AgentMode, templates: &PromptTemplates) -> Self {
        let system = match mode {
            AgentMode::Choose => templates.route_agent_system.clone(),
            AgentMode::Score => templates.score_agent_system.clone(),
        };
        Self { model, mode, system }
    }
}

fn parse_choice(reply: &str) -> Option<Path> {
    reply
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|w| w.to_ascii_lowercase().parse::<Path>().ok())
}

fn parse_scores(reply: &str) -> Option<[i64; 4]> {
    let mut out = [None; 4];
    for part in reply.split(|c: char| c.is_whitespace() || c == ',' || c == ';') {
        let Some((k, v)) = part.split_once(['=', ':']) else {
            continue;
        };
        let (Ok(p), Ok(v)) = (k.trim().to_ascii_lowercase().parse::<Path>(), v.trim().parse::<i64>()) else {
            continue;
        };
        out[p.index()] = Some(v);
    }
    Some([out[0]?, out[1]?, out[2]?, out[3]?])
}

impl PathScorer for AgentScorer {
    fn score(&self, query_text: &str, _ruleset: &RuleSet) -> Result<PathScores, RouteError> {
        let reply = self
            .model
            .generate(&format!("{}\n\nQuestion: {query_text}", self.system))
            .map_err(RouteError::Scorer)?;
        match self.mode {
            AgentMode::Choose => {
                let p =
                    parse_choice(&reply).ok_or_else(|| RouteError::Scorer(format!("no path in reply {reply:?}")))?;
                let mut s = PathScores::zero();
                s.add(p, 1);
                Ok(s)
            }
            AgentMode::Score => parse_scores(&reply)
                .map(PathScores::from_values)
                .ok_or_else(|| RouteError::Scorer(format!("no score line in reply {reply:?}"))),
        }
    }
}
