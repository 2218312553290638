//! Per-query routing: consult the meta-cache, fall back to the scorer on a
//! miss, and write the fresh decision back.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::{embed, validate_tau, CacheError, EmbedError, EmbeddingProvider, MetaCache};
use crate::rules::{score_paths, select_path, Judge, Path, PathScores, RuleError, RuleSet};
use crate::text::tokenize;

#[derive(Debug, thiserror::Error)]
pub enum RouteError {
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("batch is empty")]
    EmptyBatch,
}

/// Produces path scores for a query under a rule set.
pub trait PathScorer: Send + Sync {
    fn score(&self, query_text: &str, ruleset: &RuleSet) -> Result<PathScores, RouteError>;
}

/// The additive rule engine, optionally with a judge for semantic predicates.
#[derive(Default, Clone)]
pub struct RuleScorer {
    judge: Option<Arc<dyn Judge>>,
}

impl RuleScorer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_judge(judge: Arc<dyn Judge>) -> Self {
        Self { judge: Some(judge) }
    }
}

impl PathScorer for RuleScorer {
    fn score(&self, query_text: &str, ruleset: &RuleSet) -> Result<PathScores, RouteError> {
        Ok(score_paths(query_text, ruleset, self.judge.as_deref())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionSource {
    CacheHit,
    Scorer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub query_id: String,
    pub query_text: String,
    pub scores: PathScores,
    pub chosen_path: Path,
    pub source: DecisionSource,
    pub cache_similarity: Option<f64>,
    pub ruleset_version: u64,
    /// Set when the embedding provider failed and the cache was skipped.
    #[serde(default)]
    pub degraded_cache: bool,
    pub routing_latency: Duration,
}

/// Stable id: first 16 hex chars of SHA-256 over the normalized tokens.
pub fn query_id(query_text: &str) -> String {
    let digest = Sha256::digest(tokenize(query_text).join(" ").as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, Copy)]
pub struct RouterConfig {
    pub tau: f64,
    /// Score directly instead of failing when the embedding provider errors.
    pub degrade_on_embed_error: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            tau: crate::cache::DEFAULT_TAU,
            degrade_on_embed_error: true,
        }
    }
}

pub struct Router {
    ruleset: RwLock<Arc<RuleSet>>,
    scorer: Arc<dyn PathScorer>,
    cache: Option<(Arc<MetaCache>, Arc<dyn EmbeddingProvider>)>,
    config: RouterConfig,
    scorer_calls: AtomicU64,
}

impl Router {
    /// A router without a meta-cache: every query is scored.
    pub fn new(ruleset: RuleSet, scorer: Arc<dyn PathScorer>) -> Self {
        Self {
            ruleset: RwLock::new(Arc::new(ruleset)),
            scorer,
            cache: None,
            config: RouterConfig::default(),
            scorer_calls: AtomicU64::new(0),
        }
    }

    pub fn with_cache(
        mut self,
        cache: Arc<MetaCache>,
        embedder: Arc<dyn EmbeddingProvider>,
        config: RouterConfig,
    ) -> Result<Self, RouteError> {
        validate_tau(config.tau)?;
        if cache.dim() != embedder.dimension() {
            return Err(CacheError::DimensionMismatch {
                expected: cache.dim(),
                actual: embedder.dimension(),
            }
            .into());
        }
        self.cache = Some((cache, embedder));
        self.config = config;
        Ok(self)
    }

    pub fn ruleset(&self) -> Arc<RuleSet> {
        self.ruleset.read().expect("ruleset lock poisoned").clone()
    }

    pub fn cache(&self) -> Option<&Arc<MetaCache>> {
        self.cache.as_ref().map(|(c, _)| c)
    }

    pub fn tau(&self) -> f64 {
        self.config.tau
    }

    /// Number of times the scorer has been invoked.
    pub fn scorer_calls(&self) -> u64 {
        self.scorer_calls.load(Ordering::SeqCst)
    }

    /// Atomically replaces the active rule set. A version change empties the
    /// cache before any later route call can observe the new rules.
    pub fn swap_ruleset(&self, next: RuleSet) -> Result<(), RuleError> {
        next.validate()?;
        let mut guard = self.ruleset.write().expect("ruleset lock poisoned");
        let changed = guard.version != next.version;
        *guard = Arc::new(next);
        if changed {
            if let Some((cache, _)) = &self.cache {
                cache.invalidate_all();
            }
        }
        Ok(())
    }

    pub fn route(&self, query_text: &str) -> Result<RoutingDecision, RouteError> {
        self.route_with_id(&query_id(query_text), query_text)
    }

    /// Routes under a caller-supplied id (e.g. a dataset record id).
    pub fn route_with_id(&self, id: &str, query_text: &str) -> Result<RoutingDecision, RouteError> {
        let start = Instant::now();
        // held for the whole call so a swap cannot interleave with write-back
        let guard = self.ruleset.read().expect("ruleset lock poisoned");
        let ruleset: &RuleSet = &guard;
        if query_text.trim().is_empty() {
            return Err(RuleError::EmptyQuery.into());
        }

        let mut degraded = false;
        let mut key = None;
        if let Some((cache, embedder)) = &self.cache {
            match embed(query_text, embedder.as_ref()) {
                Ok(z) => {
                    if let Some(hit) = cache.lookup(&z, self.config.tau)? {
                        return Ok(RoutingDecision {
                            query_id: id.to_string(),
                            query_text: query_text.to_string(),
                            scores: hit.entry.scores,
                            chosen_path: hit.entry.chosen_path,
                            source: DecisionSource::CacheHit,
                            cache_similarity: Some(hit.similarity),
                            ruleset_version: ruleset.version,
                            degraded_cache: false,
                            routing_latency: start.elapsed(),
                        });
                    }
                    key = Some(z);
                }
                Err(e) if self.config.degrade_on_embed_error => {
                    log::warn!("embedding failed for query {id}, scoring without cache: {e}");
                    degraded = true;
                }
                Err(e) => return Err(e.into()),
            }
        }

        self.scorer_calls.fetch_add(1, Ordering::SeqCst);
        let scores = self.scorer.score(query_text, ruleset)?;
        let chosen = select_path(&scores, &ruleset.priority_order);
        if let (Some((cache, _)), Some(z)) = (&self.cache, key) {
            cache.insert(z, scores.clone(), chosen, ruleset.priority_order)?;
        }
        Ok(RoutingDecision {
            query_id: id.to_string(),
            query_text: query_text.to_string(),
            scores,
            chosen_path: chosen,
            source: DecisionSource::Scorer,
            cache_similarity: None,
            ruleset_version: ruleset.version,
            degraded_cache: degraded,
            routing_latency: start.elapsed(),
        })
    }

    /// Routes queries in order; cache effects of earlier queries are visible to
    /// later ones. Item errors are returned in place unless `fail_fast` is set.
    pub fn route_batch<S: AsRef<str>>(
        &self,
        queries: &[S],
        fail_fast: bool,
    ) -> Result<Vec<Result<RoutingDecision, RouteError>>, RouteError> {
        if queries.is_empty() {
            return Err(RouteError::EmptyBatch);
        }
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            let r = self.route(q.as_ref());
            if fail_fast {
                if let Err(e) = r {
                    return Err(e);
                }
            }
            out.push(r);
        }
        Ok(out)
    }
}
