use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One of the four augmentation paths a query can be routed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    /// Structured facts from the relational store.
    Db,
    /// Sparse-retrieved document passages.
    Doc,
    /// Passages and structured facts together.
    Hybrid,
    /// No retrieval; the model answers from parametric knowledge.
    Llm,
}

impl Path {
    pub const ALL: [Path; 4] = [Path::Db, Path::Doc, Path::Hybrid, Path::Llm];

    /// Default tie-break order: cheapest precise path first.
    pub const DEFAULT_PRIORITY: [Path; 4] = [Path::Db, Path::Doc, Path::Hybrid, Path::Llm];

    pub fn index(self) -> usize {
        match self {
            Path::Db => 0,
            Path::Doc => 1,
            Path::Hybrid => 2,
            Path::Llm => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Path::Db => "db",
            Path::Doc => "doc",
            Path::Hybrid => "hybrid",
            Path::Llm => "llm",
        }
    }

    /// Single-byte tag used by the cache snapshot format.
    pub fn tag(self) -> u8 {
        self.index() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Path> {
        Path::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown path {0:?} (expected db, doc, hybrid or llm)")]
pub struct UnknownPath(pub String);

impl FromStr for Path {
    type Err = UnknownPath;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "db" | "database" => Ok(Path::Db),
            "doc" | "document" => Ok(Path::Doc),
            "hybrid" => Ok(Path::Hybrid),
            "llm" | "direct" | "basic" => Ok(Path::Llm),
            _ => Err(UnknownPath(s.to_string())),
        }
    }
}

/// Returns true iff `order` contains each path exactly once.
pub fn is_permutation(order: &[Path]) -> bool {
    order.len() == 4 && Path::ALL.iter().all(|p| order.iter().filter(|q| *q == p).count() == 1)
}
