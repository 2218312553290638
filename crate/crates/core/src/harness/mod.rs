//! Datasets, oracle routing, experiment runs and report files.

mod agent;
mod experiment;
mod oracle;
mod report;
pub mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use agent::{AgentMode, AgentScorer};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentInputs, Strategy};
pub use oracle::{compute_oracle, AnswerMatrix, OracleAssignment, OracleEntry};
pub use report::{
    emit_report, CategoryRow, EvalMetrics, ExperimentReport, PathRow, QueryLog, TokenRow, DETERMINISTIC_FILES,
    TIMING_FILES,
};

use crate::evolution::EvolutionError;
use crate::qa::QaError;
use crate::retrieval::RetrievalError;
use crate::router::RouteError;
use crate::rules::{Path, RuleError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("dataset record {index}: {reason}")]
    Schema { index: usize, reason: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("no answer for query {query_id} under path {path}")]
    MissingAnswer { query_id: String, path: Path },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Rules(#[from] RuleError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Numeric,
    HowWhy,
    Definition,
    FactPlusExplanation,
    Other,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Numeric,
        Category::HowWhy,
        Category::Definition,
        Category::FactPlusExplanation,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Numeric => "numeric",
            Category::HowWhy => "how_why",
            Category::Definition => "definition",
            Category::FactPlusExplanation => "fact_plus_explanation",
            Category::Other => "other",
        }
    }

    /// The path a category's questions are meant to take.
    pub fn aligned_path(self) -> Option<Path> {
        match self {
            Category::Numeric => Some(Path::Db),
            Category::HowWhy => Some(Path::Doc),
            Category::Definition => Some(Path::Llm),
            Category::FactPlusExplanation => Some(Path::Hybrid),
            Category::Other => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub query_id: String,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub doc_refs: Vec<String>,
    #[serde(default)]
    pub table_refs: Vec<String>,
    #[serde(default)]
    pub category_label: Option<Category>,
}

impl QARecord {
    fn validate(&self) -> Result<(), String> {
        if self.query_id.trim().is_empty() {
            return Err("query_id is empty".into());
        }
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if self.gold_answers.is_empty() {
            return Err("gold_answers is empty".into());
        }
        Ok(())
    }
}

/// Reads line-delimited QA records. Indices in errors count records from 0.
pub fn load_dataset(reader: impl BufRead) -> Result<Vec<QARecord>, HarnessError> {
    let mut out: Vec<QARecord> = Vec::new();
    let mut ids = HashSet::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let index = out.len();
        let rec: QARecord = serde_json::from_str(&line).map_err(|e| HarnessError::Schema {
            index,
            reason: e.to_string(),
        })?;
        rec.validate()
            .map_err(|reason| HarnessError::Schema { index, reason })?;
        if !ids.insert(rec.query_id.clone()) {
            return Err(HarnessError::Schema {
                index,
                reason: format!("duplicate query_id {:?}", rec.query_id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Checks that every record's doc and table references exist.
pub fn check_refs<'a>(
    records: &[QARecord],
    doc_ids: impl IntoIterator<Item = &'a str>,
    table_ids: impl IntoIterator<Item = &'a str>,
) -> Result<(), HarnessError> {
    let docs: HashSet<&str> = doc_ids.into_iter().collect();
    let tables: HashSet<&str> = table_ids.into_iter().collect();
    for (index, r) in records.iter().enumerate() {
        if let Some(d) = r.doc_refs.iter().find(|d| !docs.contains(d.as_str())) {
            return Err(HarnessError::Schema {
                index,
                reason: format!("unknown doc_ref {d:?}"),
            });
        }
        if let Some(t) = r.table_refs.iter().find(|t| !tables.contains(t.as_str())) {
            return Err(HarnessError::Schema {
                index,
                reason: format!("unknown table_ref {t:?}"),
            });
        }
    }
    Ok(())
}

pub const DEFAULT_EVAL_N: usize = 500;
pub const DEFAULT_TRAIN_N: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub eval: Vec<QARecord>,
    pub train: Vec<QARecord>,
}

/// Seeded disjoint sample: `eval_n` evaluation records, then up to
/// `train_n` training records from the remainder.
pub fn split_dataset(records: &[QARecord], seed: u64, eval_n: usize, train_n: usize) -> Split {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let eval_n = eval_n.min(idx.len());
    let train_end = (eval_n + train_n).min(idx.len());
    Split {
        eval: idx[..eval_n].iter().map(|&i| records[i].clone()).collect(),
        train: idx[eval_n..train_end].iter().map(|&i| records[i].clone()).collect(),
    }
}
