use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::agent::{AgentMode, AgentScorer};
use super::oracle::{compute_oracle, AnswerMatrix, OracleAssignment};
use super::report::{CategoryRow, EvalMetrics, ExperimentReport, PathRow, QueryLog, TokenRow};
use super::{Category, HarnessError, QARecord};
use crate::cache::{EmbeddingProvider, HashingEmbedder, MetaCache, DEFAULT_CAPACITY, DEFAULT_TAU};
use crate::evolution::{grade_outcome, ExpertClient, HeuristicConfig, TokenCounts, UpdateLoop, UpdateMode};
use crate::grading::{exact_match, token_f1};
use crate::qa::{AnswerClient, QaOutcome, QaPipeline};
use crate::retrieval::TextGenerator;
use crate::router::{PathScorer, Router, RouterConfig, RoutingDecision, RuleScorer};
use crate::rules::{serialize_rules, Judge, Path, RuleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Basic,
    Doc,
    Db,
    Hybrid,
    RuleBasedStatic,
    Route,
    RouteCached,
    AgentBased,
    ScoreAgent,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Basic,
        Strategy::Doc,
        Strategy::Db,
        Strategy::Hybrid,
        Strategy::RuleBasedStatic,
        Strategy::Route,
        Strategy::RouteCached,
        Strategy::AgentBased,
        Strategy::ScoreAgent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Basic => "basic",
            Strategy::Doc => "doc",
            Strategy::Db => "db",
            Strategy::Hybrid => "hybrid",
            Strategy::RuleBasedStatic => "rule_based_static",
            Strategy::Route => "route",
            Strategy::RouteCached => "route_cached",
            Strategy::AgentBased => "agent_based",
            Strategy::ScoreAgent => "score_agent",
        }
    }

    /// The path every query takes under a fixed-path strategy.
    pub fn fixed_path(self) -> Option<Path> {
        match self {
            Strategy::Basic => Some(Path::Llm),
            Strategy::Doc => Some(Path::Doc),
            Strategy::Db => Some(Path::Db),
            Strategy::Hybrid => Some(Path::Hybrid),
            _ => None,
        }
    }

    fn for_path(path: Path) -> Self {
        match path {
            Path::Llm => Strategy::Basic,
            Path::Doc => Strategy::Doc,
            Path::Db => Strategy::Db,
            Path::Hybrid => Strategy::Hybrid,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Strategy::ALL.iter().map(|s| s.as_str()).collect();
            format!("unknown strategy {s:?} (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub tau: f64,
    pub cache_capacity: usize,
    pub batch_size: usize,
    pub update_mode: UpdateMode,
    pub heuristic: HeuristicConfig,
    pub seed: u64,
    /// Answer every eval query under all four paths for the oracle and the
    /// forced-path columns.
    pub forced_matrix: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Route,
            tau: DEFAULT_TAU,
            cache_capacity: DEFAULT_CAPACITY,
            batch_size: 100,
            update_mode: UpdateMode::Off,
            heuristic: HeuristicConfig::default(),
            seed: 0,
            forced_matrix: true,
        }
    }
}

pub struct ExperimentInputs {
    pub eval: Vec<QARecord>,
    pub train: Vec<QARecord>,
    pub ruleset: RuleSet,
    pub pipeline: QaPipeline,
    pub client: Arc<dyn AnswerClient>,
    pub expert: Option<Arc<dyn ExpertClient>>,
    pub judge: Option<Arc<dyn Judge>>,
    /// Model behind the agent baselines.
    pub agent_model: Option<Arc<dyn TextGenerator>>,
    /// Cache for `route_cached`; a fresh one is made when absent.
    pub cache: Option<Arc<MetaCache>>,
}

struct Answered {
    outcome: Result<QaOutcome, String>,
}

impl Answered {
    fn text(&self) -> &str {
        self.outcome.as_ref().map_or("", |o| o.answer.answer_text.as_str())
    }
}

fn answer_one(inputs: &ExperimentInputs, rec: &QARecord, path: Path) -> Answered {
    let outcome = inputs
        .pipeline
        .run(&rec.query_id, &rec.question, path, inputs.client.as_ref())
        .map_err(|e| {
            log::warn!("query {} under {path}: {e}", rec.query_id);
            e.to_string()
        });
    Answered { outcome }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn scorer_for(inputs: &ExperimentInputs, strategy: Strategy) -> Result<Arc<dyn PathScorer>, HarnessError> {
    Ok(match strategy {
        Strategy::RuleBasedStatic => Arc::new(RuleScorer::new()),
        Strategy::Route | Strategy::RouteCached => match &inputs.judge {
            Some(j) => Arc::new(RuleScorer::with_judge(j.clone())),
            None => Arc::new(RuleScorer::new()),
        },
        Strategy::AgentBased | Strategy::ScoreAgent => {
            let model = inputs
                .agent_model
                .clone()
                .ok_or_else(|| HarnessError::Config(format!("strategy {strategy} needs a live or scripted model")))?;
            let mode = if strategy == Strategy::AgentBased {
                AgentMode::Choose
            } else {
                AgentMode::Score
            };
            Arc::new(AgentScorer::new(model, mode, inputs.pipeline.templates()))
        }
        fixed => unreachable!("{fixed} has no scorer"),
    })
}

/// Routes and answers the training split, updating rules batch by batch.
fn train(
    inputs: &ExperimentInputs,
    config: &ExperimentConfig,
    scorer: Arc<dyn PathScorer>,
) -> Result<(RuleSet, Vec<crate::evolution::UpdateEvent>), HarnessError> {
    if config.update_mode == UpdateMode::Off || inputs.train.is_empty() {
        return Ok((inputs.ruleset.clone(), Vec::new()));
    }
    let router = Arc::new(Router::new(inputs.ruleset.clone(), scorer));
    let mut lp =
        UpdateLoop::new(router.clone(), config.batch_size, config.update_mode)?.with_heuristic(config.heuristic);
    if let Some(expert) = &inputs.expert {
        lp = lp.with_expert(expert.clone());
    } else if config.update_mode == UpdateMode::Agent {
        return Err(HarnessError::Config("agent updates need an expert client".into()));
    }
    for rec in &inputs.train {
        let decision = match router.route_with_id(&rec.query_id, &rec.question) {
            Ok(d) => d,
            Err(e) => {
                log::warn!("training query {} not routed: {e}", rec.query_id);
                continue;
            }
        };
        let a = answer_one(inputs, rec, decision.chosen_path);
        let (tokens, latency) = match &a.outcome {
            Ok(o) => (
                TokenCounts {
                    prompt: o.answer.prompt_tokens as u64,
                    completion: o.answer.completion_tokens as u64,
                },
                o.answer.generation_latency,
            ),
            Err(_) => (TokenCounts::default(), Duration::ZERO),
        };
        if let Some(ev) = lp.push(grade_outcome(&decision, a.text(), &rec.gold_answers, tokens, latency)) {
            log::info!(
                "rule update after {} outcomes: v{} -> v{}",
                ev.outcomes_seen,
                ev.from_version,
                ev.to_version
            );
        }
    }
    let events = lp.history().to_vec();
    Ok(((*router.ruleset()).clone(), events))
}

pub fn run_experiment(inputs: &ExperimentInputs, config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    if inputs.eval.is_empty() {
        return Err(HarnessError::Config("evaluation set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(HarnessError::Config("batch size must be at least 1".into()));
    }
    let strategy = config.strategy;
    let priority = inputs.ruleset.priority_order;

    // forced answers under every path
    let forced: Option<Vec<[Answered; 4]>> = config.forced_matrix.then(|| {
        inputs
            .eval
            .iter()
            .map(|rec| Path::ALL.map(|p| answer_one(inputs, rec, p)))
            .collect()
    });
    let oracle: Option<OracleAssignment> = match &forced {
        Some(rows) => {
            let mut m = AnswerMatrix::new();
            for (rec, row) in inputs.eval.iter().zip(rows) {
                for p in Path::ALL {
                    m.insert(rec.query_id.clone(), p, row[p.index()].text());
                }
            }
            Some(compute_oracle(&m, &inputs.eval, &priority)?)
        }
        None => None,
    };

    // routers
    let mut update_events = Vec::new();
    let mut final_rules = inputs.ruleset.clone();
    let router = match strategy.fixed_path() {
        Some(_) => None,
        None => {
            let scorer = scorer_for(inputs, strategy)?;
            if matches!(strategy, Strategy::Route | Strategy::RouteCached) {
                let (rules, events) = train(inputs, config, scorer.clone())?;
                final_rules = rules;
                update_events = events;
            }
            let mut r = Router::new(final_rules.clone(), scorer);
            if strategy == Strategy::RouteCached {
                let embedder: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::default());
                let cache = match &inputs.cache {
                    Some(c) => c.clone(),
                    None => Arc::new(
                        MetaCache::new(embedder.dimension(), config.cache_capacity)
                            .map_err(|e| HarnessError::Config(e.to_string()))?,
                    ),
                };
                r = r.with_cache(
                    cache,
                    embedder,
                    RouterConfig {
                        tau: config.tau,
                        degrade_on_embed_error: true,
                    },
                )?;
            }
            Some(r)
        }
    };

    // evaluation
    let mut queries = Vec::with_capacity(inputs.eval.len());
    let mut outcomes = Vec::new();
    for (i, rec) in inputs.eval.iter().enumerate() {
        let mut log = QueryLog {
            query_id: rec.query_id.clone(),
            question: rec.question.clone(),
            category: rec.category_label,
            chosen_path: None,
            source: None,
            scores: None,
            fired_rules: Vec::new(),
            cache_similarity: None,
            ruleset_version: None,
            answered_path: None,
            answer: String::new(),
            gold_answers: rec.gold_answers.clone(),
            correct: false,
            f1: 0.0,
            prompt_tokens: 0,
            completion_tokens: 0,
            degraded: false,
            error: None,
            correct_paths: None,
            oracle_path: None,
            routing_time: Duration::ZERO,
            generation_time: Duration::ZERO,
        };
        if let Some(o) = &oracle {
            log.correct_paths = Some(o.entries[i].correct_paths.clone());
            log.oracle_path = Some(o.entries[i].oracle_path);
        }
        let mut decision = None;
        let path = match (strategy.fixed_path(), &router) {
            (Some(p), _) => Some(p),
            (None, Some(r)) => match r.route_with_id(&rec.query_id, &rec.question) {
                Ok(d) => {
                    fill_decision(&mut log, &d);
                    let p = d.chosen_path;
                    decision = Some(d);
                    Some(p)
                }
                Err(e) => {
                    log.error = Some(format!("routing: {e}"));
                    None
                }
            },
            (None, None) => unreachable!("routed strategies build a router"),
        };
        if let Some(p) = path {
            log.chosen_path = Some(p);
            let fresh;
            let answered = match &forced {
                Some(rows) => &rows[i][p.index()],
                None => {
                    fresh = answer_one(inputs, rec, p);
                    &fresh
                }
            };
            match &answered.outcome {
                Ok(o) => {
                    log.answered_path = Some(o.answer.answered_path);
                    log.answer = o.answer.answer_text.clone();
                    log.prompt_tokens = o.prompt.token_count;
                    log.completion_tokens = o.answer.completion_tokens;
                    log.degraded = o.answer.degraded;
                    log.generation_time = o.answer.generation_latency;
                }
                Err(e) => log.error = Some(e.clone()),
            }
            log.correct = exact_match(&log.answer, &rec.gold_answers);
            log.f1 = token_f1(&log.answer, &rec.gold_answers);
            if let Some(d) = &decision {
                let tokens = TokenCounts {
                    prompt: log.prompt_tokens as u64,
                    completion: log.completion_tokens as u64,
                };
                outcomes.push(grade_outcome(
                    d,
                    &log.answer,
                    &rec.gold_answers,
                    tokens,
                    log.generation_time,
                ));
            }
        }
        queries.push(log);
    }

    let with_path: Vec<&QueryLog> = queries.iter().filter(|q| q.chosen_path.is_some()).collect();
    let mut path_distribution = BTreeMap::new();
    for p in Path::ALL {
        let c = with_path.iter().filter(|q| q.chosen_path == Some(p)).count();
        let frac = if with_path.is_empty() {
            0.0
        } else {
            c as f64 / with_path.len() as f64
        };
        path_distribution.insert(p, frac);
    }
    let metrics = EvalMetrics {
        n: queries.len(),
        f1: mean(queries.iter().map(|q| q.f1)),
        accuracy: mean(queries.iter().map(|q| if q.correct { 1.0 } else { 0.0 })),
        mean_prompt_tokens: mean(with_path.iter().map(|q| q.prompt_tokens as f64)),
        path_distribution,
        mean_routing_time: if router.is_some() {
            mean(with_path.iter().map(|q| q.routing_time.as_secs_f64()))
        } else {
            0.0
        },
    };

    let forced_stats = |p: Path| {
        forced.as_ref().map(|rows| {
            let golds = inputs.eval.iter().map(|r| &r.gold_answers);
            let cells: Vec<(&Answered, &Vec<String>)> = rows.iter().map(|row| &row[p.index()]).zip(golds).collect();
            let acc = mean(
                cells
                    .iter()
                    .map(|(a, g)| if exact_match(a.text(), g) { 1.0 } else { 0.0 }),
            );
            let f1 = mean(cells.iter().map(|(a, g)| token_f1(a.text(), g)));
            let tokens = mean(
                cells
                    .iter()
                    .map(|(a, _)| a.outcome.as_ref().map_or(0.0, |o| o.prompt.token_count as f64)),
            );
            (acc, f1, tokens)
        })
    };
    let paths: Vec<PathRow> = Path::ALL
        .iter()
        .map(|&p| {
            let routed: Vec<&&QueryLog> = with_path.iter().filter(|q| q.chosen_path == Some(p)).collect();
            let correct = routed.iter().filter(|q| q.correct).count();
            let fs = forced_stats(p);
            PathRow {
                path: p,
                forced_accuracy: fs.map(|f| f.0),
                forced_f1: fs.map(|f| f.1),
                forced_mean_tokens: fs.map(|f| f.2),
                routed_count: routed.len(),
                routed_correct: correct,
                routed_accuracy: if routed.is_empty() {
                    0.0
                } else {
                    correct as f64 / routed.len() as f64
                },
                routed_fraction: metrics.path_distribution[&p],
                oracle_fraction: oracle
                    .as_ref()
                    .map(|o| o.entries.iter().filter(|e| e.oracle_path == p).count() as f64 / o.entries.len() as f64),
            }
        })
        .collect();

    let mut token_table: Vec<TokenRow> = paths
        .iter()
        .filter_map(|row| {
            Some(TokenRow {
                strategy: Strategy::for_path(row.path).to_string(),
                accuracy: row.forced_accuracy?,
                mean_prompt_tokens: row.forced_mean_tokens?,
            })
        })
        .collect();
    if strategy.fixed_path().is_none() || token_table.is_empty() {
        token_table.push(TokenRow {
            strategy: strategy.to_string(),
            accuracy: metrics.accuracy,
            mean_prompt_tokens: metrics.mean_prompt_tokens,
        });
    }

    let categories = Category::ALL
        .iter()
        .filter_map(|&c| {
            let qs: Vec<&QueryLog> = queries.iter().filter(|q| q.category == Some(c)).collect();
            if qs.is_empty() {
                return None;
            }
            Some(CategoryRow {
                category: c,
                count: qs.len(),
                accuracy: mean(qs.iter().map(|q| if q.correct { 1.0 } else { 0.0 })),
                aligned_fraction: c
                    .aligned_path()
                    .map(|p| qs.iter().filter(|q| q.chosen_path == Some(p)).count() as f64 / qs.len() as f64),
            })
        })
        .collect();

    Ok(ExperimentReport {
        strategy,
        client: inputs.client.describe(),
        config: config.clone(),
        train_n: inputs.train.len(),
        initial_ruleset_version: inputs.ruleset.version,
        final_ruleset_version: final_rules.version,
        final_rules: serialize_rules(&final_rules),
        metrics,
        oracle_accuracy: oracle.as_ref().map(|o| o.accuracy),
        paths,
        token_table,
        categories,
        update_events,
        cache_stats: router.as_ref().and_then(|r| r.cache()).map(|c| c.stats()),
        scorer_calls: router.as_ref().map_or(0, |r| r.scorer_calls()),
        queries,
        outcomes,
    })
}

fn fill_decision(log: &mut QueryLog, d: &RoutingDecision) {
    log.source = Some(d.source);
    log.scores = Some(d.scores.values());
    log.fired_rules = d.scores.fired_rules.iter().map(|f| f.rule_id.clone()).collect();
    log.cache_similarity = d.cache_similarity;
    log.ruleset_version = Some(d.ruleset_version);
    log.routing_time = d.routing_latency;
}
