//! Query feature extraction. The lexicons that drive the boolean flags are
//! data, carried in the rule file header so they version with the rules.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RuleError;
use crate::text::{contains_phrase, tokenize};

/// Phrase lists consulted by [`extract_features`]. Each entry may span
/// several tokens and matches as a contiguous token run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lexicon {
    pub numeric: Vec<String>,
    pub units: Vec<String>,
    pub definition: Vec<String>,
    pub explanation: Vec<String>,
    pub interrogatives: Vec<String>,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for Lexicon {
    fn default() -> Self {
        Self {
            numeric: words(&[
                "how much",
                "how many",
                "percentage",
                "percent",
                "total",
                "amount",
                "number of",
                "ratio",
                "average",
                "calculate",
                "sum of",
                "difference between",
                "value of",
                "quantify",
            ]),
            units: words(&["million", "millions", "billion", "billions", "thousand", "thousands"]),
            definition: words(&[
                "what is",
                "what are",
                "define",
                "definition of",
                "meaning of",
                "mean",
                "stand for",
                "refer to",
            ]),
            explanation: words(&["explain", "explanation", "why", "reason", "reasons", "describe"]),
            interrogatives: words(&["how", "why", "what", "when", "where", "which", "who"]),
        }
    }
}

/// Named boolean features a rule condition can test with `(flag ...)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureFlag {
    HasNumericRequest,
    SeeksDefinition,
    SeeksFactWithExplanation,
    HasYear,
    HasInterrogative,
}

impl FeatureFlag {
    pub const ALL: [FeatureFlag; 5] = [
        FeatureFlag::HasNumericRequest,
        FeatureFlag::SeeksDefinition,
        FeatureFlag::SeeksFactWithExplanation,
        FeatureFlag::HasYear,
        FeatureFlag::HasInterrogative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureFlag::HasNumericRequest => "has_numeric_request",
            FeatureFlag::SeeksDefinition => "seeks_definition",
            FeatureFlag::SeeksFactWithExplanation => "seeks_fact_with_explanation",
            FeatureFlag::HasYear => "has_year",
            FeatureFlag::HasInterrogative => "has_interrogative",
        }
    }
}

impl fmt::Display for FeatureFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureFlag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeatureFlag::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown feature flag {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueryFeatures {
    /// Trimmed original text, handed to semantic judges.
    pub text: String,
    pub normalized_text: Vec<String>,
    pub has_numeric_request: bool,
    pub has_year: bool,
    pub interrogative_markers: BTreeSet<String>,
    pub seeks_definition: bool,
    pub seeks_fact_with_explanation: bool,
    pub matched_keywords: BTreeSet<String>,
    pub token_count: usize,
}

impl QueryFeatures {
    pub fn flag(&self, flag: FeatureFlag) -> bool {
        match flag {
            FeatureFlag::HasNumericRequest => self.has_numeric_request,
            FeatureFlag::SeeksDefinition => self.seeks_definition,
            FeatureFlag::SeeksFactWithExplanation => self.seeks_fact_with_explanation,
            FeatureFlag::HasYear => self.has_year,
            FeatureFlag::HasInterrogative => !self.interrogative_markers.is_empty(),
        }
    }
}

fn is_year(token: &str) -> bool {
    token.len() == 4 && token.bytes().all(|b| b.is_ascii_digit()) && matches!(token.parse::<u32>(), Ok(1900..=2099))
}

fn match_phrases(tokens: &[String], phrases: &[String], hits: &mut BTreeSet<String>) -> bool {
    let mut any = false;
    for phrase in phrases {
        if contains_phrase(tokens, &tokenize(phrase)) {
            hits.insert(phrase.clone());
            any = true;
        }
    }
    any
}

/// Computes the routing features of a query. Pure in `(query_text, lexicon)`.
pub fn extract_features(query_text: &str, lexicon: &Lexicon) -> Result<QueryFeatures, RuleError> {
    let text = query_text.trim();
    if text.is_empty() {
        return Err(RuleError::EmptyQuery);
    }
    let tokens = tokenize(text);
    let mut matched = BTreeSet::new();

    let has_year = tokens.iter().any(|t| is_year(t));
    let numeric_phrase = match_phrases(&tokens, &lexicon.numeric, &mut matched);
    // a unit word only counts when a number is also mentioned
    let unit_hit = match_phrases(&tokens, &lexicon.units, &mut matched);
    let has_digits = tokens.iter().any(|t| t.chars().any(|c| c.is_ascii_digit()));
    let has_numeric_request = numeric_phrase || has_year || text.contains('%') || (unit_hit && has_digits);

    let definition = match_phrases(&tokens, &lexicon.definition, &mut matched);
    let explanation = match_phrases(&tokens, &lexicon.explanation, &mut matched);

    let interrogative_markers: BTreeSet<String> = lexicon
        .interrogatives
        .iter()
        .filter(|w| tokens.iter().any(|t| t == *w))
        .cloned()
        .collect();

    let seeks_fact_with_explanation = has_numeric_request && explanation;
    let seeks_definition = definition && !has_numeric_request;

    Ok(QueryFeatures {
        text: text.to_string(),
        token_count: tokens.len(),
        normalized_text: tokens,
        has_numeric_request,
        has_year,
        interrogative_markers,
        seeks_definition,
        seeks_fact_with_explanation,
        matched_keywords: matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(q: &str) -> QueryFeatures {
        extract_features(q, &Lexicon::default()).unwrap()
    }

    #[test]
    fn numeric_request_examples() {
        let f = feats("How much was the net income in the fourth quarter?");
        assert!(f.has_numeric_request);
        assert!(f.matched_keywords.contains("how much"));
        assert_eq!(f.token_count, f.normalized_text.len());

        let f = feats("Why did revenue decline?");
        assert!(f.interrogative_markers.contains("why"));
        assert!(!f.has_numeric_request);
        assert!(!f.seeks_fact_with_explanation);
    }

    #[test]
    fn empty_query_rejected() {
        assert!(matches!(
            extract_features("   ", &Lexicon::default()),
            Err(RuleError::EmptyQuery)
        ));
    }

    #[test]
    fn explain_and_quantify_is_fact_with_explanation() {
        let f = feats("Explain and quantify the 2019 change");
        assert!(f.has_numeric_request);
        assert!(f.has_year);
        assert!(f.seeks_fact_with_explanation);
        assert!(!f.seeks_definition);
    }

    // Hand-labelled before the matcher was written: (query, seeks_definition).
    const DEFINITION_LABELS: [(&str, bool); 20] = [
        ("What is goodwill?", true),
        ("What are deferred tax assets?", true),
        ("Define operating leverage.", true),
        ("What does EBITDA mean?", true),
        ("What is the meaning of amortization?", true),
        ("What does the term working capital refer to?", true),
        ("What does ROE stand for?", true),
        ("Give the definition of a derivative instrument.", true),
        ("What is an interest rate swap?", true),
        ("What are contingent liabilities?", true),
        ("What is the 2019 carrying amount of interest rate swaps?", false),
        ("How much was the net income in the fourth quarter?", false),
        ("Why did revenue decline?", false),
        ("How should we interpret the hedging note?", false),
        ("What is the total revenue for 2018?", false),
        ("What percentage of sales came from Europe?", false),
        ("Explain the 2019 change in operating margin.", false),
        ("Who audits the company?", false),
        ("When was the company founded?", false),
        ("What are the total lease liabilities in 2020?", false),
    ];

    #[test]
    fn definition_matcher_agrees_with_hand_labels() {
        for (q, expected) in DEFINITION_LABELS {
            assert_eq!(feats(q).seeks_definition, expected, "{q}");
        }
    }

    #[test]
    fn flags_parse_by_name() {
        for f in FeatureFlag::ALL {
            assert_eq!(f.name().parse::<FeatureFlag>().unwrap(), f);
        }
        assert!("is_spicy".parse::<FeatureFlag>().is_err());
    }
}
