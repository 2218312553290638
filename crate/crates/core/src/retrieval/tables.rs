use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Read};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::bm25::Bm25Index;
use super::{RetrievalError, TextGenerator};

pub const HIGH_FREQ_VALUES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Integer,
    Real,
    Text,
}

impl ColumnType {
    fn infer<'a>(cells: impl Iterator<Item = &'a str>) -> Self {
        let mut ty = ColumnType::Integer;
        let mut any = false;
        for c in cells.map(str::trim).filter(|c| !c.is_empty()) {
            any = true;
            if ty == ColumnType::Integer && c.parse::<i64>().is_err() {
                ty = ColumnType::Real;
            }
            if ty == ColumnType::Real && !c.parse::<f64>().is_ok_and(f64::is_finite) {
                return ColumnType::Text;
            }
        }
        if any {
            ty
        } else {
            ColumnType::Text
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub ty: ColumnType,
}

/// An immutable relational table. Cells keep their source text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub table_id: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<String>>,
    pub description: String,
}

impl Table {
    pub fn new(
        table_id: impl Into<String>,
        header: Vec<String>,
        rows: Vec<Vec<String>>,
        description: impl Into<String>,
    ) -> Result<Self, RetrievalError> {
        let table_id = table_id.into();
        if header.is_empty() || header.iter().any(|h| h.trim().is_empty()) {
            return Err(RetrievalError::HeaderlessTable(table_id));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != header.len()) {
            return Err(RetrievalError::Table {
                table_id,
                reason: format!("row {} has {} cells, header has {}", i + 1, rows[i].len(), header.len()),
            });
        }
        let columns = header
            .into_iter()
            .enumerate()
            .map(|(i, name)| Column {
                ty: ColumnType::infer(rows.iter().map(|r| r[i].as_str())),
                name: name.trim().to_string(),
            })
            .collect();
        Ok(Self {
            table_id,
            columns,
            rows,
            description: description.into(),
        })
    }

    /// Reads delimited text whose first record is the header.
    pub fn from_csv(
        table_id: impl Into<String>,
        reader: impl Read,
        description: impl Into<String>,
    ) -> Result<Self, RetrievalError> {
        let table_id = table_id.into();
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| RetrievalError::Csv(table_id.clone(), e))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .map_err(|e| RetrievalError::Csv(table_id.clone(), e))?;
        Self::new(table_id, header, rows, description)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name.eq_ignore_ascii_case(name))
    }

    pub fn meta(&self) -> TableMeta {
        let mut high_freq_values = BTreeMap::new();
        for (i, col) in self.columns.iter().enumerate() {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for row in &self.rows {
                let v = row[i].trim();
                if !v.is_empty() {
                    *counts.entry(v).or_default() += 1;
                }
            }
            let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            high_freq_values.insert(
                col.name.clone(),
                ranked
                    .into_iter()
                    .take(HIGH_FREQ_VALUES)
                    .map(|(v, _)| v.to_string())
                    .collect(),
            );
        }
        TableMeta {
            table_id: self.table_id.clone(),
            schema: self.columns.clone(),
            high_freq_values,
            description: self.description.clone(),
        }
    }
}

/// Retrieval-facing summary of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMeta {
    pub table_id: String,
    pub schema: Vec<Column>,
    /// Column name -> up to five most frequent values, most frequent first.
    pub high_freq_values: BTreeMap<String, Vec<String>>,
    pub description: String,
}

impl TableMeta {
    /// The text indexed for table retrieval.
    pub fn index_text(&self) -> String {
        let mut parts = vec![self.table_id.clone()];
        for col in &self.schema {
            parts.push(col.name.clone());
            if let Some(vals) = self.high_freq_values.get(&col.name) {
                parts.extend(vals.iter().cloned());
            }
        }
        parts.push(self.description.clone());
        parts.join(" ")
    }

    /// Schema and frequent values, one column per line.
    pub fn render_schema(&self) -> String {
        let mut out = format!("table {}", self.table_id);
        if !self.description.is_empty() {
            out.push_str(&format!(" -- {}", self.description));
        }
        for col in &self.schema {
            let vals = self
                .high_freq_values
                .get(&col.name)
                .map(|v| v.join(", "))
                .unwrap_or_default();
            out.push_str(&format!("\n  {} {:?}: {}", col.name, col.ty, vals));
        }
        out
    }
}

/// Read-only store of loaded tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableStore {
    tables: BTreeMap<String, Table>,
}

impl TableStore {
    pub fn new(tables: impl IntoIterator<Item = Table>) -> Result<Self, RetrievalError> {
        let mut map = BTreeMap::new();
        for t in tables {
            if map.contains_key(&t.table_id) {
                return Err(RetrievalError::DuplicateTableId(t.table_id));
            }
            map.insert(t.table_id.clone(), t);
        }
        Ok(Self { tables: map })
    }

    pub fn get(&self, table_id: &str) -> Option<&Table> {
        self.tables.get(table_id)
    }

    pub fn tables(&self) -> impl Iterator<Item = &Table> {
        self.tables.values()
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    /// SHA-256 over every table's id, header and cells.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tables.values() {
            let canonical = serde_json::to_vec(&(&t.table_id, &t.columns, &t.rows)).expect("table serializes");
            h.update((canonical.len() as u64).to_le_bytes());
            h.update(canonical);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    table_id: String,
    path: String,
    #[serde(default)]
    description: String,
}

/// Loads a line-delimited manifest of `{table_id, path, description?}`
/// records; relative paths resolve against `base_dir`.
pub fn load_manifest(manifest: impl BufRead, base_dir: &FsPath) -> Result<Vec<Table>, RetrievalError> {
    let mut out = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| RetrievalError::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let path = base_dir.join(&entry.path);
        let file = std::fs::File::open(&path).map_err(|e| RetrievalError::Manifest {
            line: i + 1,
            reason: format!("{}: {e}", path.display()),
        })?;
        out.push(Table::from_csv(entry.table_id, file, entry.description)?);
    }
    Ok(out)
}

/// Sparse index over table metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableIndex {
    metas: Vec<TableMeta>,
    bm25: Bm25Index,
}

impl TableIndex {
    /// Indexes the tables' metadata. Tables without a description get one
    /// from `describer` when provided.
    pub fn build<'a>(
        tables: impl IntoIterator<Item = &'a Table>,
        describer: Option<&dyn TextGenerator>,
    ) -> Result<Self, RetrievalError> {
        let mut metas = Vec::new();
        for t in tables {
            let mut meta = t.meta();
            if meta.description.trim().is_empty() {
                if let Some(gen) = describer {
                    let prompt = format!(
                        "Write one sentence describing what this table contains.\n{}",
                        meta.render_schema()
                    );
                    meta.description = gen
                        .generate(&prompt)
                        .map_err(RetrievalError::Generator)?
                        .trim()
                        .to_string();
                }
            }
            metas.push(meta);
        }
        let bm25 =
            Bm25Index::build(metas.iter().map(|m| (m.table_id.clone(), m.index_text()))).map_err(|e| match e {
                RetrievalError::DuplicateDocId(id) => RetrievalError::DuplicateTableId(id),
                other => other,
            })?;
        Ok(Self { metas, bm25 })
    }

    pub fn metas(&self) -> &[TableMeta] {
        &self.metas
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Vec<(&TableMeta, f64)> {
        self.bm25
            .search(query, k)
            .into_iter()
            .map(|(n, s)| (&self.metas[n], s))
            .collect()
    }
}
