//! Seeded four-category workload with a matching corpus, table and replay
//! answers, built so each category triggers exactly one seed rule.

use std::fs;
use std::path::Path as FsPath;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Category, HarnessError, QARecord};
use crate::qa::{PromptTemplates, QaPipeline, ReplayRecord};
use crate::retrieval::{CorpusRecord, DocIndex, KnowledgeBase, RetrievalConfig, Table};
use crate::rules::Path;

const COMPANIES: &[&str] = &[
    "Acme", "Globex", "Initech", "Umbrella", "Hooli", "Vandelay", "Stark", "Wayne",
];
const METRICS: &[&str] = &[
    "revenue",
    "net income",
    "operating cash flow",
    "capital expenditure",
    "research spending",
    "interest expense",
];
const YEARS: std::ops::RangeInclusive<u32> = 2010..=2019;
const TOPICS: &[&str] = &[
    "hedging",
    "inventory",
    "pricing",
    "hiring",
    "supplier risk",
    "cybersecurity",
    "customer retention",
    "product quality",
];
const TERMS: &[&str] = &[
    "goodwill",
    "amortization",
    "working capital",
    "deferred revenue",
    "accrued liabilities",
    "impairment",
    "depreciation",
    "liquidity",
    "solvency",
    "leverage",
];
const CONTEXTS: &[&str] = &["banking", "insurance", "retail", "manufacturing", "software", "energy"];

pub const TABLE_ID: &str = "company_financials";
/// Answer returned by replay fixtures for an incorrect path.
pub const WRONG_ANSWER: &str = "not enough information";

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub records: Vec<QARecord>,
    pub corpus: Vec<CorpusRecord>,
    pub tables: Vec<Table>,
}

fn numeric_questions() -> Vec<(String, [usize; 3])> {
    let templates = [
        "How much {m} did {c} report in {y}?",
        "What was the total {m} of {c} in {y}?",
        "Calculate the {m} of {c} for {y}.",
    ];
    figure_questions(&templates)
}

fn fact_explanation_questions() -> Vec<(String, [usize; 3])> {
    let templates = [
        "How much {m} did {c} report in {y} and why did it change?",
        "Explain the {m} of {c} in {y}.",
        "What was the total {m} of {c} in {y}, and what was the reason?",
    ];
    figure_questions(&templates)
}

/// Questions over (company, metric, year); the index triple identifies the
/// table row they ask about.
fn figure_questions(templates: &[&str]) -> Vec<(String, [usize; 3])> {
    let mut out = Vec::new();
    for t in templates {
        for (ci, c) in COMPANIES.iter().enumerate() {
            for (mi, m) in METRICS.iter().enumerate() {
                for (yi, y) in YEARS.enumerate() {
                    let q = t.replace("{m}", m).replace("{c}", c).replace("{y}", &y.to_string());
                    out.push((q, [ci, mi, yi]));
                }
            }
        }
    }
    out
}

fn how_why_questions() -> Vec<(String, String)> {
    let templates = [
        "Why did {c} change its {t} policy?",
        "How does {c} manage {t}?",
        "How did {c} approach {t} during the restructuring?",
    ];
    let mut out = Vec::new();
    for tpl in templates {
        for c in COMPANIES {
            for t in TOPICS {
                let q = tpl.replace("{c}", c).replace("{t}", t);
                out.push((q, format!("{c} reorganized its {t} committee")));
            }
        }
    }
    out
}

fn definition_questions() -> Vec<(String, String)> {
    let templates = [
        "What is {t} in {x}?",
        "Define {t} for {x} reporting.",
        "What does {t} mean in {x}?",
        "What is the meaning of {t} in {x}?",
    ];
    let mut out = Vec::new();
    for tpl in templates {
        for t in TERMS {
            for x in CONTEXTS {
                let q = tpl.replace("{t}", t).replace("{x}", x);
                out.push((q, format!("{t} as used in {x}")));
            }
        }
    }
    out
}

fn pick<T: Clone>(mut pool: Vec<T>, n: usize, rng: &mut ChaCha8Rng, what: &str) -> Result<Vec<T>, HarnessError> {
    if n > pool.len() {
        return Err(HarnessError::Config(format!(
            "at most {} distinct {what} questions are available, {n} requested",
            pool.len()
        )));
    }
    pool.shuffle(rng);
    pool.truncate(n);
    Ok(pool)
}

impl Workload {
    /// `per_category` questions in each of the four routed categories,
    /// interleaved round-robin so every contiguous batch mixes categories.
    pub fn generate(seed: u64, per_category: usize) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let figures: Vec<Vec<u32>> = COMPANIES
            .iter()
            .map(|_| {
                (0..METRICS.len() * YEARS.count())
                    .map(|_| rng.gen_range(100..5000))
                    .collect()
            })
            .collect();
        let figure = |[c, m, y]: [usize; 3]| figures[c][m * YEARS.count() + y];
        let fact_row = |[c, m, y]: [usize; 3]| {
            vec![
                COMPANIES[c].to_string(),
                (YEARS.start() + y as u32).to_string(),
                METRICS[m].to_string(),
                format!("{} million", figure([c, m, y])),
            ]
        };

        let numeric = pick(numeric_questions(), per_category, &mut rng, "numeric")?;
        let how_why = pick(how_why_questions(), per_category, &mut rng, "how/why")?;
        let definition = pick(definition_questions(), per_category, &mut rng, "definition")?;
        let fact_expl = pick(
            fact_explanation_questions(),
            per_category,
            &mut rng,
            "fact-with-explanation",
        )?;

        let mut records = Vec::with_capacity(4 * per_category);
        let mut rows = Vec::new();
        let record = |id: String, q: &str, gold: String, cat: Category, tables: bool| QARecord {
            query_id: id,
            question: q.to_string(),
            gold_answers: vec![gold],
            doc_refs: vec![],
            table_refs: if tables { vec![TABLE_ID.to_string()] } else { vec![] },
            category_label: Some(cat),
        };
        for i in 0..per_category {
            let (q, key) = &numeric[i];
            rows.push(fact_row(*key));
            records.push(record(
                format!("num_{i:04}"),
                q,
                format!("{} million", figure(*key)),
                Category::Numeric,
                true,
            ));
            let (q, gold) = &how_why[i];
            records.push(record(format!("how_{i:04}"), q, gold.clone(), Category::HowWhy, false));
            let (q, gold) = &definition[i];
            records.push(record(
                format!("def_{i:04}"),
                q,
                gold.clone(),
                Category::Definition,
                false,
            ));
            let (q, key) = &fact_expl[i];
            rows.push(fact_row(*key));
            records.push(record(
                format!("fwe_{i:04}"),
                q,
                format!("{} million", figure(*key)),
                Category::FactPlusExplanation,
                true,
            ));
        }
        rows.sort();
        rows.dedup();

        let mut corpus = Vec::new();
        for t in TERMS {
            corpus.push(CorpusRecord {
                doc_id: format!("term_{}", t.replace(' ', "_")),
                text: format!("{t} is an accounting concept that appears in annual reports across industries."),
            });
        }
        for c in COMPANIES {
            for t in TOPICS {
                corpus.push(CorpusRecord {
                    doc_id: format!("{}_{}", c.to_lowercase(), t.replace(' ', "_")),
                    text: format!("{c} reorganized its {t} committee after reviewing {t} practices with its board."),
                });
            }
            for m in METRICS {
                corpus.push(CorpusRecord {
                    doc_id: format!("{}_{}", c.to_lowercase(), m.replace(' ', "_")),
                    text: format!("{c} discusses changes in {m} in the management commentary of each annual report."),
                });
            }
        }

        // every question shares vocabulary with the table description so the
        // DB path always finds the table
        let mut vocab: Vec<&str> = COMPANIES
            .iter()
            .chain(METRICS)
            .chain(TOPICS)
            .chain(TERMS)
            .chain(CONTEXTS)
            .copied()
            .collect();
        vocab.sort_unstable();
        let description = format!(
            "Reported company figures by year and metric. Covers {}.",
            vocab.join(", ")
        );
        let table = Table::new(
            TABLE_ID,
            ["company", "year", "metric", "value"].map(String::from).to_vec(),
            rows,
            description,
        )?;
        Ok(Self {
            records,
            corpus,
            tables: vec![table],
        })
    }

    /// Replay answers: the gold answer where `correct(index, record, path)`
    /// holds, a fixed wrong answer elsewhere.
    pub fn replay_records(&self, correct: impl Fn(usize, &QARecord, Path) -> bool) -> Vec<ReplayRecord> {
        let mut out = Vec::with_capacity(self.records.len() * 4);
        for (i, r) in self.records.iter().enumerate() {
            for p in Path::ALL {
                out.push(ReplayRecord {
                    query_id: r.query_id.clone(),
                    path: p,
                    answer_text: if correct(i, r, p) {
                        r.gold_answers[0].clone()
                    } else {
                        WRONG_ANSWER.to_string()
                    },
                    prompt_tokens: None,
                    completion_tokens: None,
                });
            }
        }
        out
    }

    /// Replay answers correct exactly on each category's aligned path.
    pub fn aligned_replay(&self) -> Vec<ReplayRecord> {
        self.replay_records(|_, r, p| r.category_label.and_then(Category::aligned_path) == Some(p))
    }

    /// Knowledge base over the workload's corpus and table with the built-in
    /// prompt templates.
    pub fn pipeline(&self) -> Result<QaPipeline, HarnessError> {
        let docs = DocIndex::build(self.corpus.iter().map(|d| (d.doc_id.as_str(), d.text.as_str())))?;
        let kb = KnowledgeBase::new(docs, self.tables.clone())?;
        Ok(QaPipeline::new(
            Arc::new(kb),
            PromptTemplates::builtin(),
            RetrievalConfig::default(),
        ))
    }

    /// Writes `dataset.jsonl`, `corpus.jsonl`, `tables/manifest.jsonl` with
    /// its CSV, and `replay.jsonl` (aligned answers) into `dir`.
    pub fn write_files(&self, dir: &FsPath) -> Result<(), HarnessError> {
        fs::create_dir_all(dir.join("tables"))?;
        fs::write(dir.join("dataset.jsonl"), jsonl(&self.records))?;
        fs::write(dir.join("corpus.jsonl"), jsonl(&self.corpus))?;
        fs::write(dir.join("replay.jsonl"), jsonl(&self.aligned_replay()))?;
        let mut manifest = String::new();
        for t in &self.tables {
            let file = format!("{}.csv", t.table_id);
            let mut w = csv::Writer::from_path(dir.join("tables").join(&file)).map_err(std::io::Error::other)?;
            w.write_record(t.columns.iter().map(|c| c.name.as_str()))
                .map_err(std::io::Error::other)?;
            for row in &t.rows {
                w.write_record(row).map_err(std::io::Error::other)?;
            }
            w.flush()?;
            manifest.push_str(
                &(serde_json::json!({"table_id": t.table_id, "path": file, "description": t.description}).to_string()
                    + "\n"),
            );
        }
        fs::write(dir.join("tables").join("manifest.jsonl"), manifest)?;
        Ok(())
    }
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::{parse_rules, score_paths, select_path, SEED_RULES};
    use crate::text::tokenize;
    use std::collections::HashSet;

    #[test]
    fn each_category_fires_exactly_its_rule() {
        let w = Workload::generate(3, 60).unwrap();
        let rs = parse_rules(SEED_RULES).unwrap();
        for r in &w.records {
            let s = score_paths(&r.question, &rs, None).unwrap();
            let cat = r.category_label.unwrap();
            assert_eq!(s.fired_rules.len(), 1, "{}: {:?}", r.question, s.fired_rules);
            assert_eq!(
                select_path(&s, &rs.priority_order),
                cat.aligned_path().unwrap(),
                "{}",
                r.question
            );
        }
    }

    #[test]
    fn questions_are_distinct_bags_of_words() {
        let w = Workload::generate(1, 125).unwrap();
        let bags: HashSet<Vec<String>> = w
            .records
            .iter()
            .map(|r| {
                let mut t = tokenize(&r.question);
                t.sort();
                t
            })
            .collect();
        assert_eq!(bags.len(), 500);
        assert_eq!(w.records[0].category_label, Some(Category::Numeric));
        assert_eq!(w.records[1].category_label, Some(Category::HowWhy));
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(Workload::generate(9, 10).unwrap(), Workload::generate(9, 10).unwrap());
        assert_ne!(
            Workload::generate(9, 10).unwrap().records,
            Workload::generate(10, 10).unwrap().records
        );
        assert!(Workload::generate(0, 10_000).is_err());
    }

    #[test]
    fn files_round_trip() {
        let w = Workload::generate(2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.write_files(dir.path()).unwrap();
        let recs = super::super::load_dataset(fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap().as_bytes())
            .unwrap();
        assert_eq!(recs, w.records);
        let manifest = fs::read(dir.path().join("tables/manifest.jsonl")).unwrap();
        let tables = crate::retrieval::load_manifest(manifest.as_slice(), &dir.path().join("tables")).unwrap();
        assert_eq!(tables, w.tables);
    }
}
