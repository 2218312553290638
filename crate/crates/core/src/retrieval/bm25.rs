use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::RetrievalError;
use crate::text::tokenize;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Inverted index scored with Okapi BM25 and the non-negative
/// `ln(1 + (N - df + 0.5) / (df + 0.5))` IDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    /// term -> (document number, term frequency), ascending by document number
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    pub fn build<I, S, T>(docs: I) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        Self::build_with(docs, DEFAULT_K1, DEFAULT_B)
    }

    pub fn build_with<I, S, T>(docs: I, k1: f64, b: f64) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (S, T)>,
        S: Into<String>,
        T: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut doc_ids = Vec::new();
        let mut doc_lens = Vec::new();
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for (n, (id, text)) in docs.into_iter().enumerate() {
            let id = id.into();
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateDocId(id));
            }
            let tokens = tokenize(text.as_ref());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((n as u32, count));
            }
            doc_ids.push(id);
            doc_lens.push(tokens.len() as u32);
        }
        let total: u64 = doc_lens.iter().map(|&l| l as u64).sum();
        let avg_len = if doc_ids.is_empty() {
            0.0
        } else {
            total as f64 / doc_ids.len() as f64
        };
        Ok(Self {
            k1,
            b,
            doc_ids,
            doc_lens,
            avg_len,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn doc_id(&self, n: usize) -> &str {
        &self.doc_ids[n]
    }

    pub fn doc_len(&self, n: usize) -> u32 {
        self.doc_lens[n]
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Number of documents with at least one posting.
    pub fn documents_with_postings(&self) -> usize {
        let mut docs = HashSet::new();
        for list in self.postings.values() {
            docs.extend(list.iter().map(|(d, _)| *d));
        }
        docs.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Scores every document sharing a term with `query`. Repeated query
    /// terms contribute once per occurrence.
    pub fn score_all(&self, query: &str) -> Vec<(usize, f64)> {
        let mut scores: BTreeMap<u32, f64> = BTreeMap::new();
        for term in tokenize(query) {
            let Some(list) = self.postings.get(&term) else { continue };
            let idf = self.idf(&term);
            for &(doc, tf) in list {
                let tf = tf as f64;
                let norm = 1.0 - self.b + self.b * self.doc_lens[doc as usize] as f64 / self.avg_len;
                *scores.entry(doc).or_default() += idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm);
            }
        }
        scores.into_iter().map(|(d, s)| (d as usize, s)).collect()
    }

    /// Top `k` documents by descending score, ties by doc id ascending.
    pub fn search(&self, query: &str, k: usize) -> Vec<(usize, f64)> {
        let mut hits = self.score_all(query);
        hits.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        });
        hits.truncate(k);
        hits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct transcription of the scoring formula, recomputing every
    /// statistic from raw text for each (document, term) pair.
    fn brute_force(docs: &[(String, String)], query: &str) -> Vec<(String, f64)> {
        let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| tokenize(t)).collect();
        let n = docs.len() as f64;
        let avg = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
        let q = tokenize(query);
        let mut out = Vec::new();
        for (i, (id, _)) in docs.iter().enumerate() {
            let mut s = 0.0;
            let mut any = false;
            for term in &q {
                let tf = toks[i].iter().filter(|t| *t == term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                any = true;
                let df = toks.iter().filter(|d| d.contains(term)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                s += idf * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * toks[i].len() as f64 / avg));
            }
            if any {
                out.push((id.clone(), s));
            }
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    fn toy() -> Vec<(String, String)> {
        [
            ("d1", "interest rate swaps hedge interest rate risk"),
            ("d2", "net income rose in 2019"),
            ("d3", "the company uses swaps"),
            ("d4", "revenue and net income by segment"),
            ("d5", "interest expense"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect()
    }

    #[test]
    fn sizes_and_empty_index() {
        let idx = Bm25Index::build(toy().into_iter().take(3)).unwrap();
        assert_eq!(idx.len(), 3);
        assert_eq!(idx.documents_with_postings(), 3);
        let empty = Bm25Index::build(Vec::<(String, String)>::new()).unwrap();
        assert!(empty.search("anything", 3).is_empty());
        let dup = vec![("a", "x"), ("a", "y")];
        assert!(matches!(Bm25Index::build(dup), Err(RetrievalError::DuplicateDocId(id)) if id == "a"));
    }

    #[test]
    fn zero_overlap_and_single_doc() {
        let idx = Bm25Index::build(toy()).unwrap();
        assert!(idx.search("dividend payout", 3).is_empty());
        let one = Bm25Index::build(vec![("only", "derivative notional")]).unwrap();
        assert_eq!(one.search("notional", 1)[0].0, 0);
    }

    #[test]
    fn toy_corpus_hand_scores() {
        // Frozen from an independent evaluation of the formula:
        // N=5, lengths 7,5,4,6,2, avgdl=4.8.
        let idx = Bm25Index::build(toy()).unwrap();
        let hits = idx.search("interest rate swaps", 5);
        let expected = [
            ("d1", 3.4920486330572107),
            ("d5", 1.1498693863752716),
            ("d3", 0.9395274254529659),
        ];
        assert_eq!(hits.len(), expected.len());
        for ((n, s), (id, want)) in hits.iter().zip(expected) {
            assert_eq!(idx.doc_id(*n), id);
            assert!((s - want).abs() < 1e-12, "{id}: {s} vs {want}");
        }
        let hits = idx.search("net income", 5);
        assert_eq!(idx.doc_id(hits[0].0), "d2");
        assert!((hits[0].1 - 1.7215921539026413).abs() < 1e-12);
        assert_eq!(idx.doc_id(hits[1].0), "d4");
        assert!((hits[1].1 - 1.5884793584977979).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_doc_id() {
        let idx = Bm25Index::build(vec![("b", "alpha beta"), ("a", "alpha beta"), ("c", "gamma")]).unwrap();
        let ids: Vec<_> = idx
            .search("alpha", 3)
            .iter()
            .map(|(n, _)| idx.doc_id(*n).to_string())
            .collect();
        assert_eq!(ids, ["a", "b"]);
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            docs in prop::collection::vec(prop::collection::vec(0u8..8, 1..12), 1..30),
            query in prop::collection::vec(0u8..10, 1..5),
        ) {
            let word = |w: &u8| format!("w{w}");
            let docs: Vec<(String, String)> = docs
                .iter()
                .enumerate()
                .map(|(i, d)| (format!("doc{i:03}"), d.iter().map(word).collect::<Vec<_>>().join(" ")))
                .collect();
            let q = query.iter().map(word).collect::<Vec<_>>().join(" ");
            let idx = Bm25Index::build(docs.clone()).unwrap();
            let got = idx.search(&q, docs.len());
            let want = brute_force(&docs, &q);
            prop_assert_eq!(got.len(), want.len());
            for ((n, s), (id, w)) in got.iter().zip(&want) {
                prop_assert_eq!(idx.doc_id(*n), id.as_str());
                prop_assert!((s - w).abs() <= 1e-9);
            }
            prop_assert_eq!(idx.search(&q, docs.len()), got);
        }
    }
}
