//! Rule evolution from batched QA outcomes.
//!
//! After each batch the router's decisions and their grades are summarized
//! into a [`DiagnosticsReport`]; an updater then proposes the next rule set.
//! The agent updater asks an expert client for a complete replacement rule
//! document, the heuristic updater reweights or removes existing rules.

mod diagnostics;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use diagnostics::{
    build_diagnostics, grade_outcome, DiagnosticQuery, DiagnosticsReport, OutcomeBuffer, OutcomeRecord, PathStat,
    RuleStat, TokenCounts,
};

use crate::router::Router;
use crate::rules::{parse_rules, serialize_rules, RuleError, RuleOrigin, RuleSet};
use crate::text::strip_code_fence;

#[derive(Debug, thiserror::Error)]
pub enum EvolutionError {
    #[error("diagnostics batch is empty")]
    EmptyBatch,
    #[error("report is degenerate: {0}")]
    DegenerateReport(String),
    #[error("report was built for rule set version {report}, active version is {active}")]
    VersionMismatch { report: u64, active: u64 },
    #[error("expert client failed: {0}")]
    ExpertClient(String),
    #[error("proposed rules are invalid: {0}")]
    InvalidProposedRules(#[source] RuleError),
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
}

/// The rule-making expert: receives the serialized rule document and the
/// rendered report, returns a complete replacement rule document.
pub trait ExpertClient: Send + Sync {
    fn propose(&self, ruleset_doc: &str, report_text: &str) -> Result<String, EvolutionError>;
}

/// Asks the expert for the next rule set. Invalid proposals are rejected and
/// the caller keeps the current rules.
pub fn update_rules_agent(
    ruleset: &RuleSet,
    report: &DiagnosticsReport,
    expert: &dyn ExpertClient,
) -> Result<RuleSet, EvolutionError> {
    if report.ruleset.version != ruleset.version {
        return Err(EvolutionError::VersionMismatch {
            report: report.ruleset.version,
            active: ruleset.version,
        });
    }
    let proposal = expert.propose(&serialize_rules(ruleset), &report.render())?;
    let mut next = parse_rules(strip_code_fence(&proposal)).map_err(EvolutionError::InvalidProposedRules)?;
    next.version = ruleset.version + 1;
    for rule in &mut next.rules {
        if ruleset.rule(&rule.id).is_none() {
            rule.origin = RuleOrigin::Evolved;
        }
    }
    if next.priority_order != ruleset.priority_order {
        log::warn!(
            "expert changed priority order {:?} -> {:?}",
            ruleset.priority_order,
            next.priority_order
        );
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    /// Minimum queries in a report before any update is attempted.
    pub min_report_queries: usize,
    /// Minimum triggers before a rule's delta is touched.
    pub min_triggers: u64,
    /// Accuracy margin over/under the batch accuracy that moves a delta.
    pub band: f64,
    /// Strengthening never pushes a delta above this.
    pub delta_cap: i64,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            min_report_queries: 10,
            min_triggers: 5,
            band: 0.10,
            delta_cap: 5,
        }
    }
}

/// Deterministic reweighting: rules that beat the batch accuracy by `band`
/// gain one point (up to the cap), rules that trail it by `band` lose one,
/// and rules reaching zero are dropped.
pub fn update_rules_heuristic(
    ruleset: &RuleSet,
    report: &DiagnosticsReport,
    config: &HeuristicConfig,
) -> Result<RuleSet, EvolutionError> {
    if report.queries.len() < config.min_report_queries {
        return Err(EvolutionError::DegenerateReport(format!(
            "{} queries, need at least {}",
            report.queries.len(),
            config.min_report_queries
        )));
    }
    let overall = report.batch_accuracy();
    let mut next = ruleset.clone();
    next.version = ruleset.version + 1;
    next.rules = ruleset
        .rules
        .iter()
        .filter_map(|rule| {
            let mut rule = rule.clone();
            if let Some(stat) = report.rule_stat(&rule.id) {
                if stat.trigger_count >= config.min_triggers {
                    let acc = stat.accuracy_when_triggered;
                    // small epsilon so band edges count despite float rounding
                    if acc >= overall + config.band - 1e-12 {
                        if rule.delta < config.delta_cap {
                            rule.delta += 1;
                        }
                    } else if acc <= overall - config.band + 1e-12 {
                        rule.delta -= 1;
                    }
                }
            }
            (rule.delta != 0).then_some(rule)
        })
        .collect();
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    Agent,
    Heuristic,
    Off,
}

impl std::str::FromStr for UpdateMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "agent" => Ok(UpdateMode::Agent),
            "heuristic" => Ok(UpdateMode::Heuristic),
            "off" => Ok(UpdateMode::Off),
            _ => Err(format!("unknown update mode {s:?} (agent, heuristic or off)")),
        }
    }
}

/// One executed (or attempted) rule update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub batch_index: u64,
    pub outcomes_seen: u64,
    pub from_version: u64,
    pub to_version: u64,
    pub batch_accuracy: f64,
    pub rules_after: usize,
    pub error: Option<String>,
}

/// Drives periodic rule updates: every `batch_size` outcomes one update runs
/// and the router swaps to the result.
pub struct UpdateLoop {
    router: Arc<Router>,
    batch_size: usize,
    mode: UpdateMode,
    heuristic: HeuristicConfig,
    expert: Option<Arc<dyn ExpertClient>>,
    buffer: OutcomeBuffer,
    seen: u64,
    batches: u64,
    history: Vec<UpdateEvent>,
}

impl UpdateLoop {
    pub fn new(router: Arc<Router>, batch_size: usize, mode: UpdateMode) -> Result<Self, EvolutionError> {
        if batch_size == 0 {
            return Err(EvolutionError::InvalidBatchSize);
        }
        Ok(Self {
            router,
            batch_size,
            mode,
            heuristic: HeuristicConfig::default(),
            expert: None,
            buffer: OutcomeBuffer::new(),
            seen: 0,
            batches: 0,
            history: Vec::new(),
        })
    }

    pub fn with_heuristic(mut self, config: HeuristicConfig) -> Self {
        self.heuristic = config;
        self
    }

    pub fn with_expert(mut self, expert: Arc<dyn ExpertClient>) -> Self {
        self.expert = Some(expert);
        self
    }

    pub fn router(&self) -> &Arc<Router> {
        &self.router
    }

    pub fn history(&self) -> &[UpdateEvent] {
        &self.history
    }

    /// Rule-set versions seen so far, starting with the initial one.
    pub fn versions(&self) -> Vec<u64> {
        let mut v = vec![self
            .history
            .first()
            .map_or(self.router.ruleset().version, |e| e.from_version)];
        v.extend(self.history.iter().filter(|e| e.error.is_none()).map(|e| e.to_version));
        v
    }

    /// Adds one graded outcome; runs an update when a batch completes.
    pub fn push(&mut self, outcome: OutcomeRecord) -> Option<UpdateEvent> {
        if self.mode == UpdateMode::Off {
            return None;
        }
        self.seen += 1;
        self.buffer.push(outcome);
        if self.buffer.len() < self.batch_size {
            return None;
        }
        let batch = self.buffer.drain();
        let event = self.update(&batch);
        self.history.push(event.clone());
        Some(event)
    }

    fn update(&mut self, batch: &[OutcomeRecord]) -> UpdateEvent {
        let current = self.router.ruleset();
        let batch_index = self.batches;
        self.batches += 1;
        let result = build_diagnostics(batch, &current, batch_index).and_then(|report| {
            let next = match self.mode {
                UpdateMode::Heuristic => update_rules_heuristic(&current, &report, &self.heuristic)?,
                UpdateMode::Agent => {
                    let expert = self
                        .expert
                        .as_deref()
                        .ok_or_else(|| EvolutionError::ExpertClient("no expert client configured".into()))?;
                    update_rules_agent(&current, &report, expert)?
                }
                UpdateMode::Off => unreachable!("off mode never updates"),
            };
            Ok((report.batch_accuracy(), next))
        });
        let accuracy = batch.iter().filter(|o| o.correct).count() as f64 / batch.len() as f64;
        match result.and_then(|(acc, next)| {
            self.router
                .swap_ruleset(next.clone())
                .map_err(EvolutionError::InvalidProposedRules)?;
            Ok((acc, next))
        }) {
            Ok((acc, next)) => UpdateEvent {
                batch_index,
                outcomes_seen: self.seen,
                from_version: current.version,
                to_version: next.version,
                batch_accuracy: acc,
                rules_after: next.rules.len(),
                error: None,
            },
            Err(e) => {
                log::warn!(
                    "rule update after batch {batch_index} rejected, keeping version {}: {e}",
                    current.version
                );
                UpdateEvent {
                    batch_index,
                    outcomes_seen: self.seen,
                    from_version: current.version,
                    to_version: current.version,
                    batch_accuracy: accuracy,
                    rules_after: current.rules.len(),
                    error: Some(e.to_string()),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{HashingEmbedder, MetaCache};
    use crate::router::{DecisionSource, RouteError, RouterConfig, RoutingDecision, RuleScorer};
    use crate::rules::{Condition, FiredRule, Lexicon, Path, PathScores, Rule, SEED_RULES};
    use proptest::prelude::*;
    use std::time::Duration;

    fn decision(path: Path, fired: &[&str], version: u64) -> RoutingDecision {
        let mut scores = PathScores::zero();
        for id in fired {
            scores.fired_rules.push(FiredRule {
                rule_id: id.to_string(),
                target_path: path,
                delta: 1,
            });
        }
        RoutingDecision {
            query_id: "q".into(),
            query_text: "question".into(),
            scores,
            chosen_path: path,
            source: DecisionSource::Scorer,
            cache_similarity: None,
            ruleset_version: version,
            degraded_cache: false,
            routing_latency: Duration::ZERO,
        }
    }

    fn outcome(path: Path, fired: &[&str], correct: bool) -> OutcomeRecord {
        let gold = vec!["494 million".to_string()];
        let pred = if correct { "494 million" } else { "2,763" };
        grade_outcome(
            &decision(path, fired, 0),
            pred,
            &gold,
            TokenCounts::default(),
            Duration::ZERO,
        )
    }

    fn rule(id: &str, path: Path, delta: i64) -> Rule {
        Rule {
            id: id.into(),
            description: id.into(),
            condition: Condition::parse("(flag has_year)").unwrap(),
            target_path: path,
            delta,
            origin: RuleOrigin::ExpertSeed,
        }
    }

    fn ruleset(rules: Vec<Rule>) -> RuleSet {
        RuleSet::new(0, rules, Path::DEFAULT_PRIORITY, Lexicon::default()).unwrap()
    }

    #[test]
    fn recording_grades_with_exact_match() {
        let buf = OutcomeBuffer::new();
        let gold = vec!["494 million".to_string()];
        let t = TokenCounts::default();
        assert!(
            buf.record_outcome(&decision(Path::Db, &[], 0), "494 million", &gold, t, Duration::ZERO)
                .correct
        );
        assert!(
            !buf.record_outcome(&decision(Path::Hybrid, &[], 0), "2,763", &gold, t, Duration::ZERO)
                .correct
        );
        assert!(
            !buf.record_outcome(&decision(Path::Llm, &[], 0), "", &gold, t, Duration::ZERO)
                .correct
        );
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.drain().len(), 3);
        assert!(buf.is_empty());
    }

    #[test]
    fn diagnostics_counts() {
        let rs = ruleset(vec![rule("r", Path::Db, 3), rule("never", Path::Doc, 1)]);
        let batch: Vec<_> = [true, true, true, false]
            .iter()
            .map(|c| outcome(Path::Db, &["r"], *c))
            .collect();
        let rep = build_diagnostics(&batch, &rs, 0).unwrap();
        let db = rep.path_stat(Path::Db);
        assert_eq!((db.selected_count, db.correct_count, db.accuracy), (4, 3, 0.75));
        for p in [Path::Doc, Path::Hybrid, Path::Llm] {
            let s = rep.path_stat(p);
            assert_eq!((s.selected_count, s.correct_count, s.accuracy), (0, 0, 0.0));
        }
        let never = rep.rule_stat("never").unwrap();
        assert_eq!(
            (
                never.trigger_count,
                never.correct_when_triggered,
                never.accuracy_when_triggered
            ),
            (0, 0, 0.0)
        );
        assert_eq!(rep.rule_stats.len(), 2);
        assert_eq!(rep.path_stats.iter().map(|s| s.selected_count).sum::<u64>(), 4);

        let two = vec![outcome(Path::Db, &["r"], true), outcome(Path::Doc, &["r"], true)];
        let rep = build_diagnostics(&two, &rs, 1).unwrap();
        assert_eq!(rep.rule_stat("r").unwrap().accuracy_when_triggered, 1.0);
        assert!(matches!(
            build_diagnostics(&[], &rs, 0),
            Err(EvolutionError::EmptyBatch)
        ));
    }

    #[test]
    fn rendering_has_four_sections_in_order() {
        let rs = parse_rules(SEED_RULES).unwrap();
        let batch = vec![outcome(Path::Db, &["numeric_to_db"], true)];
        let text = build_diagnostics(&batch, &rs, 3).unwrap().render();
        let pos: Vec<usize> = [
            "(i) Queries",
            "(ii) Current rule set",
            "(iii) Path-level",
            "(iv) Rule-level",
        ]
        .iter()
        .map(|h| text.find(h).unwrap())
        .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(text.contains("numeric_to_db: triggered=1 correct=1 accuracy=1.0000"));
        let recs = build_diagnostics(&batch, &rs, 3).unwrap().to_records();
        assert_eq!(recs.lines().count(), 1 + 1 + 4 + 4);
    }

    /// Builds a report with a single rule's stats at the given accuracy.
    fn report_for(
        rs: &RuleSet,
        rule_correct: usize,
        rule_total: usize,
        other_correct: usize,
        other_total: usize,
    ) -> DiagnosticsReport {
        let mut batch = Vec::new();
        for i in 0..rule_total {
            batch.push(outcome(Path::Db, &["r"], i < rule_correct));
        }
        for i in 0..other_total {
            batch.push(outcome(Path::Doc, &[], i < other_correct));
        }
        build_diagnostics(&batch, rs, 0).unwrap()
    }

    #[test]
    fn heuristic_strengthens_good_rule() {
        // rule 9/10 = 0.9; batch (9 + 1) / 20 = 0.5
        let rs = ruleset(vec![rule("r", Path::Db, 3)]);
        let rep = report_for(&rs, 9, 10, 1, 10);
        assert_eq!(rep.batch_accuracy(), 0.5);
        let next = update_rules_heuristic(&rs, &rep, &HeuristicConfig::default()).unwrap();
        assert_eq!(next.rules[0].delta, 4);
        assert_eq!(next.version, 1);
    }

    #[test]
    fn heuristic_ignores_rare_rule() {
        let rs = ruleset(vec![rule("r", Path::Db, 3)]);
        let rep = report_for(&rs, 0, 2, 10, 10);
        let next = update_rules_heuristic(&rs, &rep, &HeuristicConfig::default()).unwrap();
        assert_eq!(next.rules[0].delta, 3);
    }

    #[test]
    fn heuristic_removes_rule_reaching_zero() {
        // rule 1/10 = 0.1; batch (1 + 9) / 20 = 0.5
        let rs = ruleset(vec![rule("r", Path::Db, 1)]);
        let rep = report_for(&rs, 1, 10, 9, 10);
        let next = update_rules_heuristic(&rs, &rep, &HeuristicConfig::default()).unwrap();
        assert!(next.rules.is_empty());
    }

    #[test]
    fn heuristic_caps_and_rejects_small_reports() {
        let rs = ruleset(vec![rule("r", Path::Db, 5)]);
        let rep = report_for(&rs, 10, 10, 0, 10);
        assert_eq!(
            update_rules_heuristic(&rs, &rep, &HeuristicConfig::default())
                .unwrap()
                .rules[0]
                .delta,
            5
        );
        let small = report_for(&rs, 3, 3, 0, 3);
        assert!(matches!(
            update_rules_heuristic(&rs, &small, &HeuristicConfig::default()),
            Err(EvolutionError::DegenerateReport(_))
        ));
    }

    proptest! {
        #[test]
        fn heuristic_is_monotone_in_rule_accuracy(
            delta in prop::sample::select(vec![-3i64, -1, 1, 2, 4, 5, 7]),
            total in 5usize..15,
            lo in 0usize..15,
            hi in 0usize..15,
            other_correct in 0usize..10,
        ) {
            let (lo, hi) = (lo.min(total), hi.min(total));
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            let rs = ruleset(vec![rule("r", Path::Db, delta), rule("keep", Path::Llm, 2)]);
            let cfg = HeuristicConfig::default();
            // raise only the rule's correct count; the other queries are fixed
            let d = |c| update_rules_heuristic(&rs, &report_for(&rs, c, total, other_correct, 10), &cfg)
                .unwrap().rule("r").map_or(0, |r| r.delta);
            // raising correct_when_triggered also raises batch accuracy, but by a
            // smaller fraction, so the margin can only grow
            prop_assert!(d(hi) >= d(lo), "delta {} -> {} vs {}", delta, d(lo), d(hi));
        }
    }

    type Reply = Box<dyn Fn(&str, &str) -> String + Send + Sync>;

    struct Scripted(Reply);

    impl ExpertClient for Scripted {
        fn propose(&self, doc: &str, report: &str) -> Result<String, EvolutionError> {
            Ok((self.0)(doc, report))
        }
    }

    #[test]
    fn agent_identity_update_bumps_version() {
        let rs = parse_rules(SEED_RULES).unwrap();
        let rep = build_diagnostics(&[outcome(Path::Db, &[], true)], &rs, 0).unwrap();
        let echo = Scripted(Box::new(|doc, _| format!("```jsonl\n{doc}```")));
        let next = update_rules_agent(&rs, &rep, &echo).unwrap();
        assert_eq!(next.version, 1);
        assert_eq!(next.rules, rs.rules);
    }

    #[test]
    fn agent_malformed_proposal_rejected() {
        let rs = parse_rules(SEED_RULES).unwrap();
        let rep = build_diagnostics(&[outcome(Path::Db, &[], true)], &rs, 0).unwrap();
        let garbage = Scripted(Box::new(|_, _| "I think you should add more rules!".into()));
        assert!(matches!(
            update_rules_agent(&rs, &rep, &garbage),
            Err(EvolutionError::InvalidProposedRules(_))
        ));
    }

    #[test]
    fn agent_deleting_worst_rule() {
        let rs = parse_rules(SEED_RULES).unwrap();
        let mut batch = vec![];
        for i in 0..10 {
            batch.push(outcome(Path::Db, &["numeric_to_db"], i < 9));
            batch.push(outcome(Path::Doc, &["how_why_to_doc"], i < 2));
        }
        let rep = build_diagnostics(&batch, &rs, 0).unwrap();
        // scripted expert: parse section (iv), drop the least accurate triggered rule
        let expert = Scripted(Box::new(|doc, report| {
            let worst = report
                .split("(iv) Rule-level statistics")
                .nth(1)
                .unwrap()
                .lines()
                .filter_map(|l| {
                    let l = l.trim();
                    let (id, rest) = l.split_once(": ")?;
                    let trig: u64 = rest.split("triggered=").nth(1)?.split(' ').next()?.parse().ok()?;
                    let acc: f64 = rest.split("accuracy=").nth(1)?.split(' ').next()?.parse().ok()?;
                    (trig > 0).then(|| (id.to_string(), acc))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            doc.lines()
                .filter(|l| !l.contains(&format!("\"id\":\"{worst}\"")))
                .collect::<Vec<_>>()
                .join("\n")
        }));
        let next = update_rules_agent(&rs, &rep, &expert).unwrap();
        assert!(next.rule("how_why_to_doc").is_none());
        assert_eq!(next.rules.len(), 3);
    }

    #[test]
    fn agent_new_rules_are_marked_evolved() {
        let rs = parse_rules(SEED_RULES).unwrap();
        let rep = build_diagnostics(&[outcome(Path::Db, &[], true)], &rs, 0).unwrap();
        let add = Scripted(Box::new(|doc, _| {
            format!("{doc}{{\"id\":\"new\",\"condition\":\"(kw \\\"trend\\\")\",\"path\":\"doc\",\"delta\":2}}\n")
        }));
        let next = update_rules_agent(&rs, &rep, &add).unwrap();
        assert_eq!(next.rule("new").unwrap().origin, RuleOrigin::Evolved);
        assert_eq!(next.rule("numeric_to_db").unwrap().origin, RuleOrigin::ExpertSeed);
    }

    fn cached_router() -> Arc<Router> {
        let e = Arc::new(HashingEmbedder::default());
        Arc::new(
            Router::new(parse_rules(SEED_RULES).unwrap(), Arc::new(RuleScorer::new()))
                .with_cache(
                    Arc::new(MetaCache::new(256, 100).unwrap()),
                    e,
                    RouterConfig {
                        tau: 1.0,
                        degrade_on_embed_error: true,
                    },
                )
                .unwrap(),
        )
    }

    fn feed(lp: &mut UpdateLoop, n: usize) -> Result<usize, RouteError> {
        let mut updates = 0;
        for i in 0..n {
            let d = lp.router().route(&format!("How much revenue came from region r{i}?"))?;
            let o = grade_outcome(&d, "x", &["x".into()], TokenCounts::default(), Duration::ZERO);
            if let Some(ev) = lp.push(o) {
                updates += 1;
                if ev.error.is_none() {
                    assert!(lp.router().cache().unwrap().is_empty());
                }
            }
        }
        Ok(updates)
    }

    #[test]
    fn loop_update_counts() {
        let mut lp = UpdateLoop::new(cached_router(), 100, UpdateMode::Heuristic).unwrap();
        assert_eq!(feed(&mut lp, 100).unwrap(), 1);
        let mut lp = UpdateLoop::new(cached_router(), 25, UpdateMode::Heuristic).unwrap();
        assert_eq!(feed(&mut lp, 100).unwrap(), 4);
        assert_eq!(lp.versions(), vec![0, 1, 2, 3, 4]);
        let mut lp = UpdateLoop::new(cached_router(), 10, UpdateMode::Off).unwrap();
        assert_eq!(feed(&mut lp, 100).unwrap(), 0);
        assert_eq!(lp.router().ruleset().version, 0);
        assert!(matches!(
            UpdateLoop::new(cached_router(), 0, UpdateMode::Off),
            Err(EvolutionError::InvalidBatchSize)
        ));
    }

    #[test]
    fn loop_keeps_rules_when_update_fails() {
        let bad = Arc::new(Scripted(Box::new(|_, _| "nonsense".into())));
        let mut lp = UpdateLoop::new(cached_router(), 10, UpdateMode::Agent)
            .unwrap()
            .with_expert(bad);
        assert_eq!(feed(&mut lp, 20).unwrap(), 2);
        assert!(lp.history().iter().all(|e| e.error.is_some() && e.to_version == 0));
        assert_eq!(lp.router().ruleset().version, 0);
        lp.router().ruleset().validate().unwrap();
    }
}
