//! Answer grading: normalized exact match and token-overlap F1, each taken as
//! the max over gold answers.

use std::collections::HashMap;

/// Lowercase, drop punctuation, drop the articles "a", "an", "the", and
/// collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn f1_single(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-multiset F1 against the best-matching gold answer. 0 when `golds`
/// is empty.
pub fn token_f1(predicted: &str, golds: &[String]) -> f64 {
    let pred = normalize_answer(predicted);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    golds
        .iter()
        .map(|g| {
            let g = normalize_answer(g);
            let gold_tokens: Vec<&str> = g.split_whitespace().collect();
            f1_single(&pred_tokens, &gold_tokens)
        })
        .fold(0.0, f64::max)
}

pub fn exact_match(predicted: &str, golds: &[String]) -> bool {
    let pred = normalize_answer(predicted);
    golds.iter().any(|g| normalize_answer(g) == pred)
}
