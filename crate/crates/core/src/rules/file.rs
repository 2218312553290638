//! Line-delimited rule files.
//!
//! The first record is an optional header carrying `version`,
//! `priority_order` and an optional `lexicon`; every following record is one
//! rule with `id`, `description`, `condition` (s-expression), `path`, `delta`
//! and optional `origin`. Blank lines and lines starting with `#` are ignored.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::condition::Condition;
use super::features::Lexicon;
use super::path::{is_permutation, Path};
use super::{Rule, RuleError, RuleOrigin, RuleSet};

/// The expert-initialized rule set shipped with the crate.
pub const SEED_RULES: &str = include_str!("../../assets/seed_rules.jsonl");

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    #[serde(default)]
    version: u64,
    priority_order: Vec<Path>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lexicon: Option<Lexicon>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleRecord {
    id: String,
    #[serde(default)]
    description: String,
    condition: String,
    path: Path,
    delta: i64,
    #[serde(default = "default_origin")]
    origin: RuleOrigin,
}

fn default_origin() -> RuleOrigin {
    RuleOrigin::ExpertSeed
}

/// Parses and validates a rule document.
pub fn parse_rules(source: &str) -> Result<RuleSet, RuleError> {
    let mut header: Option<HeaderRecord> = None;
    let mut rules = Vec::new();
    let mut ids = HashSet::new();
    let mut seen_record = false;

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |reason: String| RuleError::Parse { line, reason };
        let value: Value = serde_json::from_str(trimmed).map_err(|e| parse_err(format!("invalid JSON: {e}")))?;
        let is_header = value.get("priority_order").is_some();
        if is_header {
            if seen_record {
                return Err(parse_err("header record must come first".into()));
            }
            let h: HeaderRecord = serde_json::from_value(value).map_err(|e| parse_err(format!("bad header: {e}")))?;
            if !is_permutation(&h.priority_order) {
                return Err(RuleError::InvalidPriority(format!(
                    "line {line}: {:?}",
                    h.priority_order
                )));
            }
            header = Some(h);
            seen_record = true;
            continue;
        }
        seen_record = true;
        let rec: RuleRecord = serde_json::from_value(value).map_err(|e| parse_err(format!("bad rule: {e}")))?;
        if rec.id.trim().is_empty() {
            return Err(parse_err("rule id is empty".into()));
        }
        if rec.delta == 0 {
            return Err(parse_err(format!("rule {:?}: delta must be nonzero", rec.id)));
        }
        let condition =
            Condition::parse(&rec.condition).map_err(|e| parse_err(format!("rule {:?} condition {e}", rec.id)))?;
        if !ids.insert(rec.id.clone()) {
            return Err(RuleError::DuplicateRuleId(rec.id));
        }
        rules.push(Rule {
            id: rec.id,
            description: rec.description,
            condition,
            target_path: rec.path,
            delta: rec.delta,
            origin: rec.origin,
        });
    }

    let (version, priority, lexicon) = match header {
        Some(h) => {
            let p = &h.priority_order;
            (h.version, [p[0], p[1], p[2], p[3]], h.lexicon.unwrap_or_default())
        }
        None => (0, Path::DEFAULT_PRIORITY, Lexicon::default()),
    };
    RuleSet::new(version, rules, priority, lexicon)
}

/// Writes a rule set in the same format `parse_rules` reads.
pub fn serialize_rules(ruleset: &RuleSet) -> String {
    let header = HeaderRecord {
        version: ruleset.version,
        priority_order: ruleset.priority_order.to_vec(),
        lexicon: Some(ruleset.lexicon.clone()),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in &ruleset.rules {
        let rec = RuleRecord {
            id: r.id.clone(),
            description: r.description.clone(),
            condition: r.condition.to_string(),
            path: r.target_path,
            delta: r.delta,
            origin: r.origin,
        };
        out.push_str(&serde_json::to_string(&rec).expect("rule serializes"));
        out.push('\n');
    }
    out
}
