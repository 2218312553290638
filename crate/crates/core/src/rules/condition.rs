//! Rule conditions and their s-expression syntax.
//!
//! ```text
//! (and (flag has_numeric_request) (not (kw "define" "definition of")))
//! (or (kw "how" "why") (pattern "^what (is|are) "))
//! (semantic "the question asks for a causal explanation")
//! ```
//!
//! `kw` matches any of its phrases as a contiguous token run, `pattern` is a
//! regular expression over the space-joined normalized tokens, `flag` names a
//! [`FeatureFlag`], and `semantic` defers to a judge client.

use std::collections::HashMap;
use std::fmt;

use regex::Regex;

use super::features::{FeatureFlag, QueryFeatures};
use super::{Judge, JudgeError};
use crate::text::{contains_phrase, tokenize};

pub const MAX_DEPTH: usize = 8;

#[derive(Debug, Clone)]
pub enum Condition {
    KeywordAny(Vec<String>),
    Pattern(Pattern),
    Flag(FeatureFlag),
    Semantic(String),
    And(Vec<Condition>),
    Or(Vec<Condition>),
    Not(Box<Condition>),
}

/// A compiled regular expression that remembers its source.
#[derive(Debug, Clone)]
pub struct Pattern {
    source: String,
    regex: Regex,
}

impl Pattern {
    pub fn new(source: &str) -> Result<Self, regex::Error> {
        Ok(Self {
            source: source.to_string(),
            regex: Regex::new(source)?,
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }
}

impl PartialEq for Condition {
    fn eq(&self, other: &Self) -> bool {
        use Condition::*;
        match (self, other) {
            (KeywordAny(a), KeywordAny(b)) => a == b,
            (Pattern(a), Pattern(b)) => a.source == b.source,
            (Flag(a), Flag(b)) => a == b,
            (Semantic(a), Semantic(b)) => a == b,
            (And(a), And(b)) | (Or(a), Or(b)) => a == b,
            (Not(a), Not(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Condition {}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("column {column}: {reason}")]
pub struct ConditionSyntaxError {
    pub column: usize,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("condition contains a semantic predicate but no judge is configured")]
    JudgeUnavailable,
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

impl Condition {
    pub fn depth(&self) -> usize {
        match self {
            Condition::And(cs) | Condition::Or(cs) => 1 + cs.iter().map(Condition::depth).max().unwrap_or(0),
            Condition::Not(c) => 1 + c.depth(),
            _ => 1,
        }
    }

    pub fn has_semantic(&self) -> bool {
        match self {
            Condition::Semantic(_) => true,
            Condition::And(cs) | Condition::Or(cs) => cs.iter().any(Condition::has_semantic),
            Condition::Not(c) => c.has_semantic(),
            _ => false,
        }
    }

    /// Parses one s-expression. Rejects trees deeper than [`MAX_DEPTH`].
    pub fn parse(src: &str) -> Result<Condition, ConditionSyntaxError> {
        let mut parser = SexprParser { src, pos: 0 };
        let cond = parser.expr(1)?;
        parser.skip_ws();
        if parser.pos != src.len() {
            return Err(parser.err("trailing input after condition"));
        }
        Ok(cond)
    }

    pub(crate) fn eval(&self, feats: &QueryFeatures, ctx: &mut EvalContext<'_>) -> Result<bool, EvalError> {
        Ok(match self {
            Condition::KeywordAny(kws) => kws
                .iter()
                .any(|k| contains_phrase(&feats.normalized_text, &tokenize(k))),
            Condition::Pattern(p) => p.regex.is_match(&feats.normalized_text.join(" ")),
            Condition::Flag(f) => feats.flag(*f),
            Condition::Semantic(desc) => ctx.judge(&feats.text, desc)?,
            Condition::And(cs) => {
                for c in cs {
                    if !c.eval(feats, ctx)? {
                        return Ok(false);
                    }
                }
                true
            }
            Condition::Or(cs) => {
                for c in cs {
                    if c.eval(feats, ctx)? {
                        return Ok(true);
                    }
                }
                false
            }
            Condition::Not(c) => !c.eval(feats, ctx)?,
        })
    }
}

/// Per-routing-call evaluation state: the optional judge and its memo.
pub(crate) struct EvalContext<'a> {
    judge: Option<&'a dyn Judge>,
    memo: HashMap<(String, String), bool>,
}

impl<'a> EvalContext<'a> {
    pub(crate) fn new(judge: Option<&'a dyn Judge>) -> Self {
        Self {
            judge,
            memo: HashMap::new(),
        }
    }

    pub(crate) fn has_judge(&self) -> bool {
        self.judge.is_some()
    }

    fn judge(&mut self, query: &str, predicate: &str) -> Result<bool, EvalError> {
        let key = (query.to_string(), predicate.to_string());
        if let Some(v) = self.memo.get(&key) {
            return Ok(*v);
        }
        let judge = self.judge.ok_or(EvalError::JudgeUnavailable)?;
        let v = judge.judge(query, predicate)?;
        self.memo.insert(key, v);
        Ok(v)
    }
}

/// Evaluates a condition against extracted features. Semantic leaves need a
/// judge; each distinct (query, predicate) pair is asked at most once.
pub fn evaluate_condition(
    cond: &Condition,
    feats: &QueryFeatures,
    judge: Option<&dyn Judge>,
) -> Result<bool, EvalError> {
    if cond.has_semantic() && judge.is_none() {
        return Err(EvalError::JudgeUnavailable);
    }
    cond.eval(feats, &mut EvalContext::new(judge))
}

fn write_str_lit(f: &mut fmt::Formatter<'_>, s: &str) -> fmt::Result {
    f.write_str("\"")?;
    for c in s.chars() {
        match c {
            '"' => f.write_str("\\\"")?,
            '\\' => f.write_str("\\\\")?,
            _ => write!(f, "{c}")?,
        }
    }
    f.write_str("\"")
}

/// Canonical s-expression form; `Condition::parse` accepts it back.
impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::KeywordAny(kws) => {
                f.write_str("(kw")?;
                for k in kws {
                    f.write_str(" ")?;
                    write_str_lit(f, k)?;
                }
                f.write_str(")")
            }
            Condition::Pattern(p) => {
                f.write_str("(pattern ")?;
                write_str_lit(f, &p.source)?;
                f.write_str(")")
            }
            Condition::Flag(flag) => write!(f, "(flag {flag})"),
            Condition::Semantic(d) => {
                f.write_str("(semantic ")?;
                write_str_lit(f, d)?;
                f.write_str(")")
            }
            Condition::And(cs) | Condition::Or(cs) => {
                f.write_str(if matches!(self, Condition::And(_)) {
                    "(and"
                } else {
                    "(or"
                })?;
                for c in cs {
                    write!(f, " {c}")?;
                }
                f.write_str(")")
            }
            Condition::Not(c) => write!(f, "(not {c})"),
        }
    }
}

struct SexprParser<'s> {
    src: &'s str,
    pos: usize,
}

impl<'s> SexprParser<'s> {
    fn err(&self, reason: impl Into<String>) -> ConditionSyntaxError {
        ConditionSyntaxError {
            column: self.pos + 1,
            reason: reason.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if !c.is_whitespace() {
                break;
            }
            self.pos += c.len_utf8();
        }
    }

    fn expect(&mut self, want: char) -> Result<(), ConditionSyntaxError> {
        self.skip_ws();
        match self.peek() {
            Some(c) if c == want => {
                self.pos += 1;
                Ok(())
            }
            Some(c) => Err(self.err(format!("expected '{want}', found '{c}'"))),
            None => Err(self.err(format!("expected '{want}', found end of input"))),
        }
    }

    fn atom(&mut self) -> Result<String, ConditionSyntaxError> {
        self.skip_ws();
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_whitespace() || c == '(' || c == ')' || c == '"' {
                break;
            }
            self.pos += c.len_utf8();
        }
        if start == self.pos {
            return Err(self.err("expected an identifier"));
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn string(&mut self) -> Result<String, ConditionSyntaxError> {
        self.expect('"')?;
        let mut out = String::new();
        loop {
            let c = self.peek().ok_or_else(|| self.err("unterminated string"))?;
            self.pos += c.len_utf8();
            match c {
                '"' => return Ok(out),
                '\\' => {
                    let e = self.peek().ok_or_else(|| self.err("unterminated escape"))?;
                    self.pos += e.len_utf8();
                    out.push(e);
                }
                _ => out.push(c),
            }
        }
    }

    fn at_close(&mut self) -> bool {
        self.skip_ws();
        self.peek() == Some(')')
    }

    fn strings(&mut self) -> Result<Vec<String>, ConditionSyntaxError> {
        let mut out = Vec::new();
        while !self.at_close() {
            out.push(self.string()?);
        }
        Ok(out)
    }

    fn expr(&mut self, depth: usize) -> Result<Condition, ConditionSyntaxError> {
        if depth > MAX_DEPTH {
            return Err(self.err(format!("condition nested deeper than {MAX_DEPTH}")));
        }
        self.expect('(')?;
        let op_pos = self.pos;
        let op = self.atom()?;
        let cond = match op.as_str() {
            "and" | "or" => {
                let mut children = Vec::new();
                while !self.at_close() {
                    children.push(self.expr(depth + 1)?);
                }
                if children.is_empty() {
                    return Err(self.err(format!("({op}) needs at least one operand")));
                }
                if op == "and" {
                    Condition::And(children)
                } else {
                    Condition::Or(children)
                }
            }
            "not" => Condition::Not(Box::new(self.expr(depth + 1)?)),
            "kw" => {
                let kws = self.strings()?;
                if kws.is_empty() || kws.iter().any(|k| tokenize(k).is_empty()) {
                    return Err(self.err("(kw) needs one or more non-empty phrases"));
                }
                Condition::KeywordAny(kws)
            }
            "pattern" => {
                let src = self.string()?;
                Condition::Pattern(Pattern::new(&src).map_err(|e| self.err(format!("bad pattern: {e}")))?)
            }
            "flag" => {
                self.skip_ws();
                let name = if self.peek() == Some('"') {
                    self.string()?
                } else {
                    self.atom()?
                };
                Condition::Flag(name.parse().map_err(|e: String| self.err(e))?)
            }
            "semantic" => {
                let d = self.string()?;
                if d.trim().is_empty() {
                    return Err(self.err("(semantic) needs a description"));
                }
                Condition::Semantic(d)
            }
            _ => {
                self.pos = op_pos;
                return Err(self.err(format!("unknown operator {op:?}")));
            }
        };
        self.expect(')')?;
        Ok(cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::features::{extract_features, Lexicon};

    fn feats(q: &str) -> QueryFeatures {
        extract_features(q, &Lexicon::default()).unwrap()
    }

    fn eval(src: &str, q: &str) -> bool {
        evaluate_condition(&Condition::parse(src).unwrap(), &feats(q), None).unwrap()
    }

    #[test]
    fn keyword_any_matches_how_why() {
        assert!(eval(r#"(kw "how" "why")"#, "Why did revenue decline?"));
        assert!(!eval(r#"(kw "how" "why")"#, "What is goodwill?"));
    }

    #[test]
    fn not_of_false_flag() {
        assert!(eval("(not (flag has_numeric_request))", "What is goodwill?"));
    }

    #[test]
    fn and_of_numeric_and_explain() {
        assert!(eval(
            r#"(and (flag has_numeric_request) (kw "explain"))"#,
            "Explain and quantify the 2019 change"
        ));
    }

    #[test]
    fn pattern_runs_over_normalized_tokens() {
        assert!(eval(r#"(pattern "^what (is|are) ")"#, "What IS goodwill?"));
        assert!(!eval(r#"(pattern "^what (is|are) ")"#, "So what is goodwill?"));
    }

    #[test]
    fn display_round_trips() {
        let src =
            r#"(and (flag has_numeric_request) (not (kw "define" "say \"hi\"")) (or (pattern "a\\d") (semantic "x")))"#;
        let c = Condition::parse(src).unwrap();
        assert_eq!(c.to_string(), src);
        assert_eq!(Condition::parse(&c.to_string()).unwrap(), c);
    }

    #[test]
    fn syntax_errors() {
        for bad in [
            "",
            "(kw)",
            "(flag is_spicy)",
            "(and)",
            "(xor (flag has_year))",
            "(kw \"a\"",
            "(not (flag has_year)) extra",
            "(pattern \"(\")",
        ] {
            assert!(Condition::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn depth_limit() {
        let mut src = "(flag has_year)".to_string();
        for _ in 0..7 {
            src = format!("(not {src})");
        }
        assert_eq!(Condition::parse(&src).unwrap().depth(), 8);
        let too_deep = format!("(not {src})");
        assert!(Condition::parse(&too_deep).is_err());
    }

    #[test]
    fn semantic_without_judge_is_an_error() {
        let c = Condition::parse(r#"(or (flag has_year) (semantic "asks for a trend"))"#).unwrap();
        let r = evaluate_condition(&c, &feats("revenue in 2019"), None);
        assert!(matches!(r, Err(EvalError::JudgeUnavailable)));
    }

    struct CountingJudge(std::sync::atomic::AtomicUsize);

    impl Judge for CountingJudge {
        fn judge(&self, _query: &str, predicate: &str) -> Result<bool, JudgeError> {
            self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(predicate.contains("trend"))
        }
    }

    #[test]
    fn semantic_calls_are_memoized_within_a_context() {
        let judge = CountingJudge(Default::default());
        let c = Condition::parse(r#"(and (semantic "asks for a trend") (semantic "asks for a trend"))"#).unwrap();
        let mut ctx = EvalContext::new(Some(&judge));
        let f = feats("revenue trend");
        assert!(c.eval(&f, &mut ctx).unwrap());
        assert!(c.eval(&f, &mut ctx).unwrap());
        assert_eq!(judge.0.load(std::sync::atomic::Ordering::SeqCst), 1);
    }
}
