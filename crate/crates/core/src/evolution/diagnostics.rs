use std::fmt::Write as _;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::EvolutionError;
use crate::grading::exact_match;
use crate::router::RoutingDecision;
use crate::rules::{serialize_rules, Path, RuleSet};

/// A graded QA result for one routed query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub query_id: String,
    pub query_text: String,
    pub decision: RoutingDecision,
    pub predicted_answer: String,
    pub gold_answers: Vec<String>,
    pub correct: bool,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub answer_latency: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TokenCounts {
    pub prompt: u64,
    pub completion: u64,
}

/// Builds an outcome, grading `predicted` with normalized exact match.
pub fn grade_outcome(
    decision: &RoutingDecision,
    predicted: &str,
    golds: &[String],
    tokens: TokenCounts,
    latency: Duration,
) -> OutcomeRecord {
    OutcomeRecord {
        query_id: decision.query_id.clone(),
        query_text: decision.query_text.clone(),
        decision: decision.clone(),
        predicted_answer: predicted.to_string(),
        gold_answers: golds.to_vec(),
        correct: exact_match(predicted, golds),
        prompt_tokens: tokens.prompt,
        completion_tokens: tokens.completion,
        answer_latency: latency,
    }
}

/// Append-only buffer of outcomes for the current batch.
#[derive(Debug, Default)]
pub struct OutcomeBuffer {
    records: Mutex<Vec<OutcomeRecord>>,
}

impl OutcomeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_outcome(
        &self,
        decision: &RoutingDecision,
        predicted: &str,
        golds: &[String],
        tokens: TokenCounts,
        latency: Duration,
    ) -> OutcomeRecord {
        let rec = grade_outcome(decision, predicted, golds, tokens, latency);
        self.records.lock().expect("outcome buffer poisoned").push(rec.clone());
        rec
    }

    pub fn push(&self, rec: OutcomeRecord) {
        self.records.lock().expect("outcome buffer poisoned").push(rec);
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("outcome buffer poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn drain(&self) -> Vec<OutcomeRecord> {
        std::mem::take(&mut *self.records.lock().expect("outcome buffer poisoned"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStat {
    pub path: Path,
    pub selected_count: u64,
    pub correct_count: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleStat {
    pub rule_id: String,
    pub trigger_count: u64,
    pub correct_when_triggered: u64,
    pub accuracy_when_triggered: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticQuery {
    pub query_text: String,
    pub chosen_path: Path,
    pub correct: bool,
}

/// Batch summary handed to the rule updater: the queries, the rule set they
/// were routed under, per-path and per-rule outcome statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub batch_index: u64,
    pub queries: Vec<DiagnosticQuery>,
    pub ruleset: RuleSet,
    pub path_stats: Vec<PathStat>,
    pub rule_stats: Vec<RuleStat>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl DiagnosticsReport {
    pub fn batch_accuracy(&self) -> f64 {
        let correct = self.queries.iter().filter(|q| q.correct).count() as u64;
        ratio(correct, self.queries.len() as u64)
    }

    pub fn path_stat(&self, path: Path) -> &PathStat {
        &self.path_stats[path.index()]
    }

    pub fn rule_stat(&self, rule_id: &str) -> Option<&RuleStat> {
        self.rule_stats.iter().find(|s| s.rule_id == rule_id)
    }

    /// Plain-text rendering given to the rule-making expert.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "DIAGNOSTICS REPORT batch={} ruleset_version={} queries={} accuracy={:.4}",
            self.batch_index,
            self.ruleset.version,
            self.queries.len(),
            self.batch_accuracy()
        );
        out.push_str("\n(i) Queries\n");
        for (i, q) in self.queries.iter().enumerate() {
            let _ = writeln!(
                out,
                "  [{}] path={} correct={} | {}",
                i + 1,
                q.chosen_path,
                if q.correct { "yes" } else { "no" },
                q.query_text
            );
        }
        out.push_str("\n(ii) Current rule set\n");
        for line in serialize_rules(&self.ruleset).lines() {
            let _ = writeln!(out, "  {line}");
        }
        out.push_str("\n(iii) Path-level statistics\n");
        for s in &self.path_stats {
            let _ = writeln!(
                out,
                "  {}: selected={} correct={} accuracy={:.4}",
                s.path, s.selected_count, s.correct_count, s.accuracy
            );
        }
        out.push_str("\n(iv) Rule-level statistics\n");
        for s in &self.rule_stats {
            let (path, delta) = self
                .ruleset
                .rule(&s.rule_id)
                .map(|r| (r.target_path.to_string(), r.delta))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "  {}: triggered={} correct={} accuracy={:.4} (path={} delta={})",
                s.rule_id, s.trigger_count, s.correct_when_triggered, s.accuracy_when_triggered, path, delta
            );
        }
        out
    }

    /// Line-delimited records for the harness, one per query and statistic.
    pub fn to_records(&self) -> String {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        enum Rec<'a> {
            Summary {
                batch_index: u64,
                ruleset_version: u64,
                queries: usize,
                accuracy: f64,
            },
            Query(&'a DiagnosticQuery),
            PathStat(&'a PathStat),
            RuleStat(&'a RuleStat),
        }
        let mut recs = vec![Rec::Summary {
            batch_index: self.batch_index,
            ruleset_version: self.ruleset.version,
            queries: self.queries.len(),
            accuracy: self.batch_accuracy(),
        }];
        recs.extend(self.queries.iter().map(Rec::Query));
        recs.extend(self.path_stats.iter().map(Rec::PathStat));
        recs.extend(self.rule_stats.iter().map(Rec::RuleStat));
        recs.iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Aggregates a batch of outcomes into a diagnostics report.
pub fn build_diagnostics(
    batch: &[OutcomeRecord],
    ruleset: &RuleSet,
    batch_index: u64,
) -> Result<DiagnosticsReport, EvolutionError> {
    if batch.is_empty() {
        return Err(EvolutionError::EmptyBatch);
    }
    let mut selected = [0u64; 4];
    let mut correct = [0u64; 4];
    for rec in batch {
        let i = rec.decision.chosen_path.index();
        selected[i] += 1;
        if rec.correct {
            correct[i] += 1;
        }
    }
    let path_stats = Path::ALL
        .iter()
        .map(|p| PathStat {
            path: *p,
            selected_count: selected[p.index()],
            correct_count: correct[p.index()],
            accuracy: ratio(correct[p.index()], selected[p.index()]),
        })
        .collect();
    let rule_stats = ruleset
        .rules
        .iter()
        .map(|rule| {
            let fired: Vec<&OutcomeRecord> = batch
                .iter()
                .filter(|rec| rec.decision.scores.fired_rules.iter().any(|f| f.rule_id == rule.id))
                .collect();
            let ok = fired.iter().filter(|r| r.correct).count() as u64;
            RuleStat {
                rule_id: rule.id.clone(),
                trigger_count: fired.len() as u64,
                correct_when_triggered: ok,
                accuracy_when_triggered: ratio(ok, fired.len() as u64),
            }
        })
        .collect();
    Ok(DiagnosticsReport {
        batch_index,
        queries: batch
            .iter()
            .map(|r| DiagnosticQuery {
                query_text: r.query_text.clone(),
                chosen_path: r.decision.chosen_path,
                correct: r.correct,
            })
            .collect(),
        ruleset: ruleset.clone(),
        path_stats,
        rule_stats,
    })
}
