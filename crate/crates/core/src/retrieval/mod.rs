//! Per-path evidence: BM25 passages for Doc, table retrieval plus a
//! read-only structured query for DB, both for Hybrid.

pub mod bm25;
pub mod sql;
pub mod tables;

use std::io::BufRead;

use serde::{Deserialize, Serialize};

pub use bm25::Bm25Index;
pub use sql::{
    check_read_only, execute_structured_query, fallback_query, generate_structured_query, parse_query, render_facts,
    validate_against, FactRecord, StructuredQuery, DEFAULT_MAX_ROWS,
};
pub use tables::{load_manifest, Column, ColumnType, Table, TableIndex, TableMeta, TableStore};

use crate::rules::Path;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("duplicate document id {0:?}")]
    DuplicateDocId(String),
    #[error("duplicate table id {0:?}")]
    DuplicateTableId(String),
    #[error("table {0:?} has no header row")]
    HeaderlessTable(String),
    #[error("table {table_id:?}: {reason}")]
    Table { table_id: String, reason: String },
    #[error("table {0:?}: {1}")]
    Csv(String, #[source] csv::Error),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("corpus line {line}: {reason}")]
    Corpus { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unsafe statement: {0}")]
    UnsafeStatement(String),
    #[error("unsupported statement: {0}")]
    UnsupportedQuery(String),
    #[error("unknown column {column:?} in table {table:?}")]
    UnknownColumn { table: String, column: String },
    #[error("statement targets unknown table {0:?}")]
    UnknownTable(String),
    #[error("execution failed: {0}")]
    Execution(String),
    #[error("no table matched the query")]
    NoTableFound,
    #[error("text generator failed: {0}")]
    Generator(String),
    #[error("k must be at least 1")]
    InvalidK,
}

/// Free-text completion used for structured-query and description writing.
pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub doc_id: String,
    pub text: String,
    pub retrieval_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub doc_id: String,
    pub text: String,
}

/// Reads line-delimited `{doc_id, text}` records.
pub fn load_corpus(reader: impl BufRead) -> Result<Vec<CorpusRecord>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| RetrievalError::Corpus {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if rec.text.trim().is_empty() {
            return Err(RetrievalError::Corpus {
                line: i + 1,
                reason: format!("document {:?} has empty text", rec.doc_id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// BM25 index over passages, keeping their text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocIndex {
    bm25: Bm25Index,
    texts: Vec<String>,
}

impl DocIndex {
    pub fn build<I, S, T>(corpus: I) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: Into<String>,
    {
        let docs: Vec<(String, String)> = corpus.into_iter().map(|(id, t)| (id.into(), t.into())).collect();
        let bm25 = Bm25Index::build(docs.iter().map(|(id, t)| (id.clone(), t.as_str())))?;
        Ok(Self {
            bm25,
            texts: docs.into_iter().map(|(_, t)| t).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.bm25.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bm25.is_empty()
    }

    pub fn bm25(&self) -> &Bm25Index {
        &self.bm25
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Passage>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        Ok(self
            .bm25
            .search(query, k)
            .into_iter()
            .map(|(n, s)| Passage {
                doc_id: self.bm25.doc_id(n).to_string(),
                text: self.texts[n].clone(),
                retrieval_score: s,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub passages_k: usize,
    pub tables_k: usize,
    pub max_rows: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            passages_k: 3,
            tables_k: 1,
            max_rows: DEFAULT_MAX_ROWS,
        }
    }
}

/// Evidence assembled for one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub path: Path,
    pub passages: Vec<Passage>,
    pub facts: Vec<FactRecord>,
    /// Set when part of the path's evidence could not be produced.
    pub degraded: bool,
}

impl EvidenceBundle {
    pub fn empty(path: Path) -> Self {
        Self {
            path,
            passages: Vec::new(),
            facts: Vec::new(),
            degraded: false,
        }
    }

    /// Checks the path/evidence exclusivity rules.
    pub fn is_consistent(&self) -> bool {
        match self.path {
            Path::Llm => self.passages.is_empty() && self.facts.is_empty(),
            Path::Doc => self.facts.is_empty(),
            Path::Db => self.passages.is_empty(),
            Path::Hybrid => true,
        }
    }
}

/// Everything retrieval needs, immutable after build.
pub struct KnowledgeBase {
    pub docs: DocIndex,
    pub tables: TableIndex,
    pub store: TableStore,
    generator: Option<Box<dyn TextGenerator>>,
}

impl KnowledgeBase {
    pub fn new(docs: DocIndex, tables: Vec<Table>) -> Result<Self, RetrievalError> {
        let index = TableIndex::build(&tables, None)?;
        Ok(Self {
            docs,
            tables: index,
            store: TableStore::new(tables)?,
            generator: None,
        })
    }

    /// Routes structured-query writing through `generator` instead of the
    /// template fallback.
    pub fn with_generator(mut self, generator: Box<dyn TextGenerator>) -> Self {
        self.generator = Some(generator);
        self
    }

    fn facts(&self, query: &str, config: &RetrievalConfig) -> Result<Vec<FactRecord>, RetrievalError> {
        if config.tables_k == 0 {
            return Err(RetrievalError::InvalidK);
        }
        let metas = self.tables.retrieve(query, config.tables_k);
        if metas.is_empty() {
            return Err(RetrievalError::NoTableFound);
        }
        metas
            .into_iter()
            .map(|(meta, _)| {
                let q = generate_structured_query(query, meta, self.generator.as_deref(), config.max_rows)?;
                execute_structured_query(&q, &self.store, config.max_rows)
            })
            .collect()
    }

    pub fn gather_evidence(
        &self,
        path: Path,
        query: &str,
        config: &RetrievalConfig,
    ) -> Result<EvidenceBundle, RetrievalError> {
        let mut bundle = EvidenceBundle::empty(path);
        match path {
            Path::Llm => {}
            Path::Doc => bundle.passages = self.docs.retrieve(query, config.passages_k)?,
            Path::Db => bundle.facts = self.facts(query, config)?,
            Path::Hybrid => {
                bundle.passages = self.docs.retrieve(query, config.passages_k)?;
                match self.facts(query, config) {
                    Ok(f) => bundle.facts = f,
                    Err(e) => {
                        log::debug!("hybrid evidence without facts: {e}");
                        bundle.degraded = true;
                    }
                }
            }
        }
        debug_assert!(bundle.is_consistent());
        Ok(bundle)
    }
}
