//! A single-table, read-only structured query dialect:
//!
//! ```text
//! SELECT * | col [, col]* FROM table
//!   [WHERE col op literal [AND col op literal]*] [LIMIT n] [;]
//! ```
//!
//! `op` is one of `= != <> < <= > >=`; literals are numbers or single-quoted
//! strings. Anything else is rejected before execution.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tables::{ColumnType, TableMeta, TableStore};
use super::{RetrievalError, TextGenerator};
use crate::text::{contains_phrase, strip_code_fence, tokenize};

pub const DEFAULT_MAX_ROWS: usize = 50;

/// Keywords that never appear in an accepted statement.
const FORBIDDEN: &[&str] = &[
    "INSERT",
    "UPDATE",
    "DELETE",
    "DROP",
    "ALTER",
    "CREATE",
    "REPLACE",
    "TRUNCATE",
    "ATTACH",
    "DETACH",
    "PRAGMA",
    "GRANT",
    "REVOKE",
    "MERGE",
    "UPSERT",
    "VACUUM",
    "EXEC",
    "EXECUTE",
    "CALL",
    "INTO",
    "COPY",
    "RENAME",
    "LOAD",
    "SET",
    "BEGIN",
    "COMMIT",
    "ROLLBACK",
    "SAVEPOINT",
    "REINDEX",
    "ANALYZE",
    "WITH",
];

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Quoted(String),
    Str(String),
    Num(String),
    Op(&'static str),
    Comma,
    Star,
    Semi,
    Other(char),
}

fn unsafe_stmt(reason: impl Into<String>) -> RetrievalError {
    RetrievalError::UnsafeStatement(reason.into())
}

fn lex(sql: &str) -> Result<Vec<Tok>, RetrievalError> {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        match c {
            c if c.is_whitespace() => i += 1,
            '-' if next == Some('-') => return Err(unsafe_stmt("comments are not allowed")),
            '/' if next == Some('*') => return Err(unsafe_stmt("comments are not allowed")),
            '\'' | '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return Err(unsafe_stmt("unterminated quote")),
                        Some(&q) if q == c && chars.get(i + 1) == Some(&c) => {
                            s.push(c);
                            i += 2;
                        }
                        Some(&q) if q == c => {
                            i += 1;
                            break;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                out.push(if c == '\'' { Tok::Str(s) } else { Tok::Quoted(s) });
            }
            c if c.is_ascii_digit() || (c == '-' && next.is_some_and(|n| n.is_ascii_digit())) => {
                let start = i;
                i += 1;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                out.push(Tok::Num(chars[start..i].iter().collect()));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Tok::Word(chars[start..i].iter().collect()));
            }
            '=' => {
                out.push(Tok::Op("="));
                i += 1;
            }
            '!' | '<' | '>' => {
                let op = match (c, next) {
                    ('!', Some('=')) => "!=",
                    ('<', Some('>')) => "!=",
                    ('<', Some('=')) => "<=",
                    ('>', Some('=')) => ">=",
                    ('<', _) => "<",
                    ('>', _) => ">",
                    _ => return Err(unsafe_stmt("unexpected '!'")),
                };
                i += op.len();
                out.push(Tok::Op(op));
            }
            ',' => {
                out.push(Tok::Comma);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            ';' => {
                out.push(Tok::Semi);
                i += 1;
            }
            other => {
                out.push(Tok::Other(other));
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Rejects anything but a single read-only SELECT. Runs before parsing.
pub fn check_read_only(sql: &str) -> Result<(), RetrievalError> {
    let toks = lex(sql)?;
    if let Some(pos) = toks.iter().position(|t| *t == Tok::Semi) {
        if pos + 1 != toks.len() {
            return Err(unsafe_stmt("more than one statement"));
        }
    }
    for t in &toks {
        if let Tok::Word(w) = t {
            let upper = w.to_ascii_uppercase();
            if FORBIDDEN.contains(&upper.as_str()) {
                return Err(unsafe_stmt(format!("forbidden keyword {upper}")));
            }
        }
    }
    match toks.first() {
        Some(Tok::Word(w)) if w.eq_ignore_ascii_case("select") => Ok(()),
        _ => Err(unsafe_stmt("statement must start with SELECT")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CompareOp {
    fn from_str(s: &str) -> Self {
        match s {
            "=" => CompareOp::Eq,
            "!=" => CompareOp::Ne,
            "<" => CompareOp::Lt,
            "<=" => CompareOp::Le,
            ">" => CompareOp::Gt,
            _ => CompareOp::Ge,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Ne => "!=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        }
    }

    fn accepts(self, ord: Ordering) -> bool {
        match self {
            CompareOp::Eq => ord == Ordering::Equal,
            CompareOp::Ne => ord != Ordering::Equal,
            CompareOp::Lt => ord == Ordering::Less,
            CompareOp::Le => ord != Ordering::Greater,
            CompareOp::Gt => ord == Ordering::Greater,
            CompareOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Literal {
    Number(f64),
    Text(String),
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Number(n) => write!(f, "{n}"),
            Literal::Text(s) => write!(f, "'{}'", s.replace('\'', "''")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub column: String,
    pub op: CompareOp,
    pub value: Literal,
}

impl Filter {
    fn matches(&self, cell: &str) -> bool {
        let cell = cell.trim();
        if cell.is_empty() {
            return false;
        }
        let ord = match &self.value {
            Literal::Number(n) => match cell.parse::<f64>() {
                Ok(c) => c.partial_cmp(n),
                Err(_) => Some(cell.to_lowercase().cmp(&n.to_string())),
            },
            Literal::Text(s) => Some(cell.to_lowercase().cmp(&s.trim().to_lowercase())),
        };
        ord.is_some_and(|o| self.op.accepts(o))
    }
}

/// A parsed, validated statement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredQuery {
    pub table: String,
    /// `None` selects every column.
    pub columns: Option<Vec<String>>,
    pub filters: Vec<Filter>,
    pub limit: Option<usize>,
}

impl fmt::Display for StructuredQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = self.columns.as_ref().map_or("*".to_string(), |c| c.join(", "));
        write!(f, "SELECT {cols} FROM {}", self.table)?;
        for (i, flt) in self.filters.iter().enumerate() {
            let kw = if i == 0 { "WHERE" } else { "AND" };
            write!(f, " {kw} {} {} {}", flt.column, flt.op.as_str(), flt.value)?;
        }
        if let Some(n) = self.limit {
            write!(f, " LIMIT {n}")?;
        }
        Ok(())
    }
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, RetrievalError> {
        match self.bump() {
            Some(Tok::Word(w)) | Some(Tok::Quoted(w)) => Ok(w),
            other => Err(RetrievalError::UnsupportedQuery(format!(
                "expected {what}, found {other:?}"
            ))),
        }
    }
}

/// Parses one statement after the read-only check.
pub fn parse_query(sql: &str) -> Result<StructuredQuery, RetrievalError> {
    check_read_only(sql)?;
    let unsupported = |m: String| RetrievalError::UnsupportedQuery(m);
    let mut p = Parser {
        toks: lex(sql)?,
        pos: 0,
    };
    p.keyword("select");
    let columns = if p.peek() == Some(&Tok::Star) {
        p.pos += 1;
        None
    } else {
        let mut cols = vec![p.ident("column")?];
        while p.peek() == Some(&Tok::Comma) {
            p.pos += 1;
            cols.push(p.ident("column")?);
        }
        Some(cols)
    };
    if !p.keyword("from") {
        return Err(unsupported("expected FROM".into()));
    }
    let table = p.ident("table name")?;
    let mut filters = Vec::new();
    if p.keyword("where") {
        loop {
            let column = p.ident("column")?;
            let op = match p.bump() {
                Some(Tok::Op(op)) => CompareOp::from_str(op),
                other => return Err(unsupported(format!("expected comparison, found {other:?}"))),
            };
            let value = match p.bump() {
                Some(Tok::Str(s)) => Literal::Text(s),
                Some(Tok::Num(n)) => {
                    Literal::Number(n.parse::<f64>().map_err(|_| unsupported(format!("bad number {n}")))?)
                }
                other => return Err(unsupported(format!("expected literal, found {other:?}"))),
            };
            filters.push(Filter { column, op, value });
            if !p.keyword("and") {
                break;
            }
        }
    }
    let mut limit = None;
    if p.keyword("limit") {
        limit = match p.bump() {
            Some(Tok::Num(n)) => Some(n.parse::<usize>().map_err(|_| unsupported(format!("bad limit {n}")))?),
            other => return Err(unsupported(format!("expected row count, found {other:?}"))),
        };
    }
    if p.peek() == Some(&Tok::Semi) {
        p.pos += 1;
    }
    if let Some(t) = p.peek() {
        return Err(unsupported(format!("unexpected {t:?}")));
    }
    Ok(StructuredQuery {
        table,
        columns,
        filters,
        limit,
    })
}

/// Resolves the statement's table and columns against `meta`, rewriting
/// names to the schema's spelling.
pub fn validate_against(mut q: StructuredQuery, meta: &TableMeta) -> Result<StructuredQuery, RetrievalError> {
    if !q.table.eq_ignore_ascii_case(&meta.table_id) {
        return Err(RetrievalError::UnknownTable(q.table));
    }
    q.table = meta.table_id.clone();
    let resolve = |name: &str| {
        meta.schema
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
            .map(|c| c.name.clone())
            .ok_or_else(|| RetrievalError::UnknownColumn {
                table: meta.table_id.clone(),
                column: name.to_string(),
            })
    };
    if let Some(cols) = &mut q.columns {
        for c in cols.iter_mut() {
            *c = resolve(c)?;
        }
    }
    for f in &mut q.filters {
        f.column = resolve(&f.column)?;
    }
    Ok(q)
}

/// Template statement: a full-row read filtered on every column whose
/// frequent value appears verbatim in the query, otherwise unfiltered.
pub fn fallback_query(query: &str, meta: &TableMeta, max_rows: usize) -> StructuredQuery {
    let q_tokens = tokenize(query);
    let mut filters = Vec::new();
    for col in &meta.schema {
        let Some(values) = meta.high_freq_values.get(&col.name) else {
            continue;
        };
        // longest matching value wins, frequency order breaks ties
        let best = values
            .iter()
            .map(|v| (v, tokenize(v)))
            .filter(|(_, t)| contains_phrase(&q_tokens, t))
            .fold(None::<(&String, usize)>, |best, (v, t)| match best {
                Some((_, n)) if n >= t.len() => best,
                _ => Some((v, t.len())),
            });
        if let Some((v, _)) = best {
            let value = match (col.ty, v.trim().parse::<f64>()) {
                (ColumnType::Integer | ColumnType::Real, Ok(n)) => Literal::Number(n),
                _ => Literal::Text(v.clone()),
            };
            filters.push(Filter {
                column: col.name.clone(),
                op: CompareOp::Eq,
                value,
            });
        }
    }
    StructuredQuery {
        table: meta.table_id.clone(),
        columns: None,
        filters,
        limit: Some(max_rows),
    }
}

/// Builds the statement for `query` over `meta`, from the generator when
/// one is configured, otherwise from the template fallback.
pub fn generate_structured_query(
    query: &str,
    meta: &TableMeta,
    generator: Option<&dyn TextGenerator>,
    max_rows: usize,
) -> Result<StructuredQuery, RetrievalError> {
    let Some(gen) = generator else {
        return Ok(fallback_query(query, meta, max_rows));
    };
    let prompt = format!(
        "Write one read-only SQL SELECT statement over the table below that retrieves the rows needed to \
         answer the question. Use only the listed columns, equality or comparison filters joined by AND, \
         and an optional LIMIT. Return only the statement.\n\n{}\n\nQuestion: {query}",
        meta.render_schema()
    );
    let text = gen.generate(&prompt).map_err(RetrievalError::Generator)?;
    validate_against(parse_query(strip_code_fence(&text))?, meta)
}

/// Rows returned by a structured query, with their verbatim rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactRecord {
    pub table_id: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub truncated: bool,
    pub rendered: String,
}

/// Header line then one pipe-delimited line per row.
pub fn render_facts(columns: &[String], rows: &[Vec<String>], truncated: bool) -> String {
    let mut out = columns.join(" | ");
    if rows.is_empty() {
        out.push_str("\n(no rows)");
    }
    for row in rows {
        out.push('\n');
        out.push_str(&row.join(" | "));
    }
    if truncated {
        out.push_str(&format!("\n(truncated to {} rows)", rows.len()));
    }
    out
}

/// Runs a statement against the store, returning at most `max_rows` rows.
pub fn execute_structured_query(
    q: &StructuredQuery,
    store: &TableStore,
    max_rows: usize,
) -> Result<FactRecord, RetrievalError> {
    let table = store
        .get(&q.table)
        .ok_or_else(|| RetrievalError::Execution(format!("no table {}", q.table)))?;
    let col_idx = |name: &str| {
        table
            .column_index(name)
            .ok_or_else(|| RetrievalError::Execution(format!("no column {name} in {}", table.table_id)))
    };
    let projection: Vec<usize> = match &q.columns {
        None => (0..table.columns.len()).collect(),
        Some(cols) => cols.iter().map(|c| col_idx(c)).collect::<Result<_, _>>()?,
    };
    let filters: Vec<(usize, &Filter)> = q
        .filters
        .iter()
        .map(|f| Ok((col_idx(&f.column)?, f)))
        .collect::<Result<_, RetrievalError>>()?;
    let limit = q.limit.unwrap_or(usize::MAX);
    let mut matched = table
        .rows
        .iter()
        .filter(|row| filters.iter().all(|(i, f)| f.matches(&row[*i])))
        .take(limit);
    let rows: Vec<Vec<String>> = matched
        .by_ref()
        .take(max_rows)
        .map(|row| projection.iter().map(|&i| row[i].clone()).collect())
        .collect();
    let truncated = matched.next().is_some();
    let columns: Vec<String> = projection.iter().map(|&i| table.columns[i].name.clone()).collect();
    let rendered = render_facts(&columns, &rows, truncated);
    Ok(FactRecord {
        table_id: table.table_id.clone(),
        columns,
        rows,
        truncated,
        rendered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::tables::Table;
    use proptest::prelude::*;

    fn swaps() -> Table {
        let csv = "year,instrument,notional_millions\n2019,interest rate swaps,494\n2018,interest rate swaps,2763\n2019,foreign exchange forwards,120\n";
        Table::from_csv("derivatives", csv.as_bytes(), "hedging derivatives").unwrap()
    }

    fn store() -> TableStore {
        TableStore::new([swaps()]).unwrap()
    }

    #[test]
    fn rejects_writes_and_stacked_statements() {
        for sql in [
            "DROP TABLE x",
            "delete from derivatives",
            "SELECT * FROM derivatives; DROP TABLE derivatives",
            "INSERT INTO derivatives VALUES (1,2,3)",
            "SELECT * INTO copy FROM derivatives",
            "UPDATE derivatives SET year = 1",
            "SELECT * FROM derivatives -- sneaky",
            "SELECT * FROM derivatives WHERE year = '2019",
            "WITH t AS (SELECT 1) SELECT * FROM t",
        ] {
            assert!(
                matches!(parse_query(sql), Err(RetrievalError::UnsafeStatement(_))),
                "{sql}"
            );
        }
        // keywords inside string literals are data
        assert!(parse_query("SELECT * FROM derivatives WHERE instrument = 'drop table'").is_ok());
    }

    #[test]
    fn parses_and_round_trips() {
        let q = parse_query("select year, notional_millions from derivatives where instrument = 'interest rate swaps' and year >= 2019 limit 5;").unwrap();
        assert_eq!(
            q.columns.as_deref(),
            Some(&["year".to_string(), "notional_millions".to_string()][..])
        );
        assert_eq!(q.filters.len(), 2);
        assert_eq!(q.limit, Some(5));
        assert_eq!(parse_query(&q.to_string()).unwrap(), q);
        assert!(matches!(
            parse_query("SELECT year FROM a, b"),
            Err(RetrievalError::UnsupportedQuery(_))
        ));
    }

    #[test]
    fn unknown_columns_and_tables() {
        let meta = swaps().meta();
        let bad_col = parse_query("SELECT revenue FROM derivatives").unwrap();
        assert!(matches!(
            validate_against(bad_col, &meta),
            Err(RetrievalError::UnknownColumn { .. })
        ));
        let bad_tab = parse_query("SELECT * FROM payroll").unwrap();
        assert!(matches!(
            validate_against(bad_tab, &meta),
            Err(RetrievalError::UnknownTable(_))
        ));
        let ok = validate_against(parse_query("SELECT YEAR FROM Derivatives").unwrap(), &meta).unwrap();
        assert_eq!(ok.to_string(), "SELECT year FROM derivatives");
    }

    struct Fixed(&'static str);

    impl TextGenerator for Fixed {
        fn generate(&self, _: &str) -> Result<String, String> {
            Ok(self.0.to_string())
        }
    }

    #[test]
    fn generator_output_is_validated() {
        let meta = swaps().meta();
        let drop = Fixed("DROP TABLE x");
        assert!(matches!(
            generate_structured_query("q", &meta, Some(&drop), 50),
            Err(RetrievalError::UnsafeStatement(_))
        ));
        let fenced = Fixed("```sql\nSELECT notional_millions FROM derivatives WHERE year = 2019\n```");
        let q = generate_structured_query("q", &meta, Some(&fenced), 50).unwrap();
        assert_eq!(q.filters[0].column, "year");
    }

    #[test]
    fn fallback_filters_on_frequent_values() {
        let meta = swaps().meta();
        let q = fallback_query("What was the notional of interest rate swaps in 2019?", &meta, 50);
        assert_eq!(
            q.to_string(),
            "SELECT * FROM derivatives WHERE year = 2019 AND instrument = 'interest rate swaps' LIMIT 50"
        );
        let facts = execute_structured_query(&q, &store(), 50).unwrap();
        assert_eq!(facts.rows, vec![vec!["2019", "interest rate swaps", "494"]]);
        assert!(facts.rendered.contains("494"));
        let open = fallback_query("Summarize the table", &meta, 50);
        assert_eq!(open.to_string(), "SELECT * FROM derivatives LIMIT 50");
    }

    #[test]
    fn rendering_and_caps() {
        let none = parse_query("SELECT * FROM derivatives WHERE year = 1990").unwrap();
        let f = execute_structured_query(&none, &store(), 50).unwrap();
        assert!(f.rows.is_empty());
        assert_eq!(f.rendered, "year | instrument | notional_millions\n(no rows)");

        let rows = (0..100).map(|i| vec![i.to_string()]).collect();
        let big = TableStore::new([Table::new("big", vec!["n".into()], rows, "").unwrap()]).unwrap();
        let all = parse_query("SELECT * FROM big").unwrap();
        let f = execute_structured_query(&all, &big, 50).unwrap();
        assert_eq!(f.rows.len(), 50);
        assert!(f.truncated);
        assert!(f.rendered.ends_with("(truncated to 50 rows)"));
        let limited = parse_query("SELECT * FROM big WHERE n < 10 LIMIT 50").unwrap();
        let f = execute_structured_query(&limited, &big, 50).unwrap();
        assert_eq!((f.rows.len(), f.truncated), (10, false));
        let exact = parse_query("SELECT * FROM big LIMIT 50").unwrap();
        assert!(!execute_structured_query(&exact, &big, 50).unwrap().truncated);
    }

    proptest! {
        #[test]
        fn write_keywords_never_parse(
            kw in prop::sample::select(FORBIDDEN.to_vec()),
            prefix in prop::sample::select(vec!["", "SELECT * FROM t; ", "select a from t where b = 1 ", "  "]),
            lower in any::<bool>(),
        ) {
            let kw = if lower { kw.to_lowercase() } else { kw.to_string() };
            let sql = format!("{prefix}{kw} t");
            prop_assert!(parse_query(&sql).is_err());
        }

        #[test]
        fn rendering_is_deterministic(rows in prop::collection::vec(prop::collection::vec("[a-z0-9]{0,4}", 2), 0..5)) {
            let cols = vec!["a".to_string(), "b".to_string()];
            prop_assert_eq!(render_facts(&cols, &rows, false), render_facts(&cols, &rows, false));
        }
    }
}
