use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{HarnessError, QARecord};
use crate::grading::exact_match;
use crate::qa::ReplayClient;
use crate::rules::Path;

/// Answers per (query id, path).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnswerMatrix {
    answers: BTreeMap<(String, Path), String>,
}

impl AnswerMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, path: Path, answer: impl Into<String>) {
        self.answers.insert((query_id.into(), path), answer.into());
    }

    pub fn get(&self, query_id: &str, path: Path) -> Option<&str> {
        self.answers.get(&(query_id.to_string(), path)).map(String::as_str)
    }

    /// Copies the replay answers for `records` under every path.
    pub fn from_replay(client: &ReplayClient, records: &[QARecord]) -> Result<Self, HarnessError> {
        let mut m = Self::new();
        for r in records {
            for p in Path::ALL {
                let rec = client
                    .answer_for(&r.query_id, p)
                    .ok_or_else(|| HarnessError::MissingAnswer {
                        query_id: r.query_id.clone(),
                        path: p,
                    })?;
                m.insert(r.query_id.clone(), p, rec.answer_text.clone());
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub query_id: String,
    /// Paths whose answer is correct, in canonical path order.
    pub correct_paths: Vec<Path>,
    /// Highest-priority correct path, or the priority head when none is.
    pub oracle_path: Path,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAssignment {
    pub entries: Vec<OracleEntry>,
    pub accuracy: f64,
}

impl OracleAssignment {
    pub fn entry(&self, query_id: &str) -> Option<&OracleEntry> {
        self.entries.iter().find(|e| e.query_id == query_id)
    }
}

/// Grades every path's answer and assigns each query its best path.
pub fn compute_oracle(
    answers: &AnswerMatrix,
    records: &[QARecord],
    priority: &[Path; 4],
) -> Result<OracleAssignment, HarnessError> {
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let mut correct_paths = Vec::new();
        for p in Path::ALL {
            let a = answers.get(&r.query_id, p).ok_or_else(|| HarnessError::MissingAnswer {
                query_id: r.query_id.clone(),
                path: p,
            })?;
            if exact_match(a, &r.gold_answers) {
                correct_paths.push(p);
            }
        }
        let oracle_path = priority
            .iter()
            .copied()
            .find(|p| correct_paths.contains(p))
            .unwrap_or(priority[0]);
        entries.push(OracleEntry {
            query_id: r.query_id.clone(),
            correct_paths,
            oracle_path,
        });
    }
    let answerable = entries.iter().filter(|e| !e.correct_paths.is_empty()).count();
    let accuracy = if entries.is_empty() {
        0.0
    } else {
        answerable as f64 / entries.len() as f64
    };
    Ok(OracleAssignment { entries, accuracy })
}
