use std::collections::BTreeMap;
use std::fs;
use std::path::Path as FsPath;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::experiment::{ExperimentConfig, Strategy};
use super::{Category, HarnessError};
use crate::cache::CacheStats;
use crate::evolution::{OutcomeRecord, UpdateEvent};
use crate::router::DecisionSource;
use crate::rules::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub mean_prompt_tokens: f64,
    /// Fraction of routed (or forced) queries per path; sums to 1 when any
    /// query received a path.
    pub path_distribution: BTreeMap<Path, f64>,
    /// Wall-clock around routing only, in seconds. Kept out of the
    /// deterministic files.
    #[serde(skip)]
    pub mean_routing_time: f64,
}

/// One evaluated query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLog {
    pub query_id: String,
    pub question: String,
    pub category: Option<Category>,
    pub chosen_path: Option<Path>,
    pub source: Option<DecisionSource>,
    pub scores: Option<[i64; 4]>,
    pub fired_rules: Vec<String>,
    pub cache_similarity: Option<f64>,
    pub ruleset_version: Option<u64>,
    pub answered_path: Option<Path>,
    pub answer: String,
    pub gold_answers: Vec<String>,
    pub correct: bool,
    pub f1: f64,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub degraded: bool,
    pub error: Option<String>,
    pub correct_paths: Option<Vec<Path>>,
    pub oracle_path: Option<Path>,
    #[serde(skip)]
    pub routing_time: Duration,
    #[serde(skip)]
    pub generation_time: Duration,
}

/// Forced versus routed use of one path, plus selection against the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    pub path: Path,
    pub forced_accuracy: Option<f64>,
    pub forced_f1: Option<f64>,
    pub forced_mean_tokens: Option<f64>,
    pub routed_count: usize,
    pub routed_correct: usize,
    pub routed_accuracy: f64,
    pub routed_fraction: f64,
    pub oracle_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub strategy: String,
    pub accuracy: f64,
    pub mean_prompt_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: Category,
    pub count: usize,
    pub accuracy: f64,
    /// Fraction sent to the category's aligned path.
    pub aligned_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub strategy: Strategy,
    pub client: String,
    pub config: ExperimentConfig,
    pub train_n: usize,
    pub initial_ruleset_version: u64,
    pub final_ruleset_version: u64,
    pub final_rules: String,
    pub metrics: EvalMetrics,
    pub oracle_accuracy: Option<f64>,
    pub paths: Vec<PathRow>,
    pub token_table: Vec<TokenRow>,
    pub categories: Vec<CategoryRow>,
    pub update_events: Vec<UpdateEvent>,
    pub cache_stats: Option<CacheStats>,
    pub scorer_calls: u64,
    pub queries: Vec<QueryLog>,
    /// Graded outcomes of routed evaluation queries, in input order.
    #[serde(skip)]
    pub outcomes: Vec<OutcomeRecord>,
}

/// Files whose bytes depend only on inputs, config and seed.
pub const DETERMINISTIC_FILES: &[&str] = &[
    "metrics.json",
    "decisions.jsonl",
    "accuracy_vs_tokens.csv",
    "path_utilization.csv",
    "categories.csv",
    "rule_updates.csv",
    "final_rules.jsonl",
];

/// Wall-clock measurements, excluded from byte-level comparisons.
pub const TIMING_FILES: &[&str] = &[
    "timing.json",
    "timing_accuracy_vs_routing_time.csv",
    "timing_queries.csv",
];

fn write_csv<T: Serialize>(path: &FsPath, rows: &[T], header: &[&str]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    if rows.is_empty() {
        w.write_record(header).map_err(csv_io)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> HarnessError {
    HarnessError::Io(std::io::Error::other(e))
}

fn json_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Writes the report's files into `dir`, creating it if needed.
pub fn emit_report(report: &ExperimentReport, dir: &FsPath) -> Result<Vec<String>, HarnessError> {
    if report.queries.is_empty() {
        return Err(HarnessError::Config("report has no evaluated queries".into()));
    }
    fs::create_dir_all(dir)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        strategy: Strategy,
        client: &'a str,
        config: &'a ExperimentConfig,
        train_n: usize,
        initial_ruleset_version: u64,
        final_ruleset_version: u64,
        metrics: &'a EvalMetrics,
        oracle_accuracy: Option<f64>,
        scorer_calls: u64,
        cache_stats: Option<&'a CacheStats>,
        rule_updates: usize,
    }
    fs::write(
        dir.join("metrics.json"),
        json_pretty(&Summary {
            strategy: report.strategy,
            client: &report.client,
            config: &report.config,
            train_n: report.train_n,
            initial_ruleset_version: report.initial_ruleset_version,
            final_ruleset_version: report.final_ruleset_version,
            metrics: &report.metrics,
            oracle_accuracy: report.oracle_accuracy,
            scorer_calls: report.scorer_calls,
            cache_stats: report.cache_stats.as_ref(),
            rule_updates: report.update_events.iter().filter(|e| e.error.is_none()).count(),
        }),
    )?;

    let decisions: String = report
        .queries
        .iter()
        .map(|q| serde_json::to_string(q).expect("query log serializes") + "\n")
        .collect();
    fs::write(dir.join("decisions.jsonl"), decisions)?;

    write_csv(
        &dir.join("accuracy_vs_tokens.csv"),
        &report.token_table,
        &["strategy", "accuracy", "mean_prompt_tokens"],
    )?;
    write_csv(&dir.join("path_utilization.csv"), &report.paths, &[])?;
    write_csv(
        &dir.join("categories.csv"),
        &report.categories,
        &["category", "count", "accuracy", "aligned_fraction"],
    )?;

    #[derive(Serialize)]
    struct UpdateRow<'a> {
        batch_index: u64,
        outcomes_seen: u64,
        from_version: u64,
        to_version: u64,
        batch_accuracy: f64,
        rules_after: usize,
        error: &'a str,
    }
    let updates: Vec<UpdateRow> = report
        .update_events
        .iter()
        .map(|e| UpdateRow {
            batch_index: e.batch_index,
            outcomes_seen: e.outcomes_seen,
            from_version: e.from_version,
            to_version: e.to_version,
            batch_accuracy: e.batch_accuracy,
            rules_after: e.rules_after,
            error: e.error.as_deref().unwrap_or(""),
        })
        .collect();
    write_csv(
        &dir.join("rule_updates.csv"),
        &updates,
        &[
            "batch_index",
            "outcomes_seen",
            "from_version",
            "to_version",
            "batch_accuracy",
            "rules_after",
            "error",
        ],
    )?;
    fs::write(dir.join("final_rules.jsonl"), &report.final_rules)?;

    let routed: Vec<&QueryLog> = report.queries.iter().filter(|q| q.chosen_path.is_some()).collect();
    let mean_gen = report.queries.iter().map(|q| millis(q.generation_time)).sum::<f64>() / report.queries.len() as f64;
    fs::write(
        dir.join("timing.json"),
        json_pretty(&serde_json::json!({
            "mean_routing_time_ms": report.metrics.mean_routing_time * 1e3,
            "mean_generation_time_ms": mean_gen,
            "routed_queries": routed.len(),
        })),
    )?;
    write_csv(
        &dir.join("timing_accuracy_vs_routing_time.csv"),
        &[TimingRow {
            strategy: report.strategy.to_string(),
            accuracy: report.metrics.accuracy,
            mean_routing_time_ms: report.metrics.mean_routing_time * 1e3,
        }],
        &[],
    )?;
    #[derive(Serialize)]
    struct QueryTiming<'a> {
        query_id: &'a str,
        routing_time_ms: f64,
        generation_time_ms: f64,
    }
    let per_query: Vec<QueryTiming> = report
        .queries
        .iter()
        .map(|q| QueryTiming {
            query_id: &q.query_id,
            routing_time_ms: millis(q.routing_time),
            generation_time_ms: millis(q.generation_time),
        })
        .collect();
    write_csv(&dir.join("timing_queries.csv"), &per_query, &[])?;

    let mut files: Vec<String> = DETERMINISTIC_FILES
        .iter()
        .chain(TIMING_FILES)
        .map(|s| s.to_string())
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Serialize)]
struct TimingRow {
    strategy: String,
    accuracy: f64,
    mean_routing_time_ms: f64,
}
