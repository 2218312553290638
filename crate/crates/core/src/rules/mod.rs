//! Interpretable additive routing rules.
//!
//! A [`RuleSet`] is an ordered list of `condition -> (path, delta)` rules plus
//! a tie-break priority over the four [`Path`]s. Scoring a query sums the
//! deltas of every rule whose condition holds (base score 0 per path), and
//! selection takes the argmax, breaking ties by priority.

mod condition;
mod features;
mod file;
mod path;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use condition::{evaluate_condition, Condition, ConditionSyntaxError, EvalError, Pattern, MAX_DEPTH};
pub use features::{extract_features, FeatureFlag, Lexicon, QueryFeatures};
pub use file::{parse_rules, serialize_rules, SEED_RULES};
pub use path::{is_permutation, Path, UnknownPath};

use condition::EvalContext;

#[derive(Debug, thiserror::Error)]
pub enum RuleError {
    #[error("rule file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate rule id {0:?}")]
    DuplicateRuleId(String),
    #[error("priority order must contain each path exactly once: {0}")]
    InvalidPriority(String),
    #[error("rule {id:?}: {reason}")]
    InvalidRule { id: String, reason: String },
    #[error("query is empty")]
    EmptyQuery,
    #[error("rule {rule_id:?} has a semantic predicate but no judge is configured")]
    JudgeUnavailable { rule_id: String },
    #[error("judge failed on rule {rule_id:?}: {source}")]
    Judge { rule_id: String, source: JudgeError },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct JudgeError(pub String);

/// Resolves natural-language rule predicates, typically backed by an LLM.
pub trait Judge: Send + Sync {
    fn judge(&self, query: &str, predicate: &str) -> Result<bool, JudgeError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleOrigin {
    ExpertSeed,
    Evolved,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub id: String,
    pub description: String,
    pub condition: Condition,
    pub target_path: Path,
    pub delta: i64,
    pub origin: RuleOrigin,
}

/// Immutable, versioned rule snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    pub version: u64,
    pub rules: Vec<Rule>,
    pub priority_order: [Path; 4],
    pub lexicon: Lexicon,
}

impl RuleSet {
    pub fn new(version: u64, rules: Vec<Rule>, priority_order: [Path; 4], lexicon: Lexicon) -> Result<Self, RuleError> {
        let set = Self {
            version,
            rules,
            priority_order,
            lexicon,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn empty() -> Self {
        Self {
            version: 0,
            rules: Vec::new(),
            priority_order: Path::DEFAULT_PRIORITY,
            lexicon: Lexicon::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RuleError> {
        if !is_permutation(&self.priority_order) {
            return Err(RuleError::InvalidPriority(format!("{:?}", self.priority_order)));
        }
        let mut seen = HashSet::new();
        for rule in &self.rules {
            if rule.id.trim().is_empty() {
                return Err(RuleError::InvalidRule {
                    id: rule.id.clone(),
                    reason: "empty id".into(),
                });
            }
            if !seen.insert(rule.id.as_str()) {
                return Err(RuleError::DuplicateRuleId(rule.id.clone()));
            }
            if rule.delta == 0 {
                return Err(RuleError::InvalidRule {
                    id: rule.id.clone(),
                    reason: "delta must be nonzero".into(),
                });
            }
            if rule.condition.depth() > MAX_DEPTH {
                return Err(RuleError::InvalidRule {
                    id: rule.id.clone(),
                    reason: format!("condition deeper than {MAX_DEPTH}"),
                });
            }
        }
        Ok(())
    }

    pub fn rule(&self, id: &str) -> Option<&Rule> {
        self.rules.iter().find(|r| r.id == id)
    }

    pub fn has_semantic_rules(&self) -> bool {
        self.rules.iter().any(|r| r.condition.has_semantic())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiredRule {
    pub rule_id: String,
    pub target_path: Path,
    pub delta: i64,
}

/// Per-path additive scores together with the rules that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PathScores {
    scores: [i64; 4],
    #[serde(default)]
    pub fired_rules: Vec<FiredRule>,
}

impl PathScores {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Scores without provenance, e.g. when loaded from a cache snapshot.
    pub fn from_values(values: [i64; 4]) -> Self {
        Self {
            scores: values,
            fired_rules: Vec::new(),
        }
    }

    pub fn get(&self, path: Path) -> i64 {
        self.scores[path.index()]
    }

    /// Scores in [`Path::ALL`] order.
    pub fn values(&self) -> [i64; 4] {
        self.scores
    }

    pub fn add(&mut self, path: Path, delta: i64) {
        self.scores[path.index()] += delta;
    }

    pub fn fire(&mut self, rule: &Rule) {
        self.add(rule.target_path, rule.delta);
        self.fired_rules.push(FiredRule {
            rule_id: rule.id.clone(),
            target_path: rule.target_path,
            delta: rule.delta,
        });
    }
}

impl fmt::Display for PathScores {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Path::ALL.iter().map(|p| format!("{p}={}", self.get(*p))).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Scores every path for `query_text` under `ruleset`.
pub fn score_paths(query_text: &str, ruleset: &RuleSet, judge: Option<&dyn Judge>) -> Result<PathScores, RuleError> {
    let feats = extract_features(query_text, &ruleset.lexicon)?;
    score_features(&feats, ruleset, judge)
}

pub fn score_features(
    feats: &QueryFeatures,
    ruleset: &RuleSet,
    judge: Option<&dyn Judge>,
) -> Result<PathScores, RuleError> {
    let mut ctx = EvalContext::new(judge);
    let mut scores = PathScores::zero();
    for rule in &ruleset.rules {
        if rule.condition.has_semantic() && !ctx.has_judge() {
            return Err(RuleError::JudgeUnavailable {
                rule_id: rule.id.clone(),
            });
        }
        let fired = rule.condition.eval(feats, &mut ctx).map_err(|e| match e {
            EvalError::JudgeUnavailable => RuleError::JudgeUnavailable {
                rule_id: rule.id.clone(),
            },
            EvalError::Judge(source) => RuleError::Judge {
                rule_id: rule.id.clone(),
                source,
            },
        })?;
        if fired {
            scores.fire(rule);
        }
    }
    Ok(scores)
}

/// Argmax over the four paths; equal maxima resolve to the earliest path in
/// `priority_order`.
pub fn select_path(scores: &PathScores, priority_order: &[Path; 4]) -> Path {
    let best = Path::ALL.iter().map(|p| scores.get(*p)).max().unwrap_or(0);
    priority_order
        .iter()
        .copied()
        .find(|p| scores.get(*p) == best)
        .unwrap_or(priority_order[0])
}
