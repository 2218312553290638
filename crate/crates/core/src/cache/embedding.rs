use serde::Serialize;

use crate::text::tokenize;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding provider failed: {0}")]
    Provider(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector cannot be unit-normalized (zero or non-finite)")]
    Normalization,
}

/// A unit-norm query embedding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// L2-normalizes `raw`.
    pub fn normalize(raw: &[f32]) -> Result<Self, EmbedError> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::Normalization);
        }
        let norm = raw.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::Normalization);
        }
        Ok(Self(raw.iter().map(|v| (f64::from(*v) / norm) as f32).collect()))
    }

    /// Wraps a vector that is already unit norm (within 1e-6).
    pub fn from_unit(values: Vec<f32>) -> Result<Self, EmbedError> {
        let norm = values.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(EmbedError::Normalization);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// Cosine similarity of two unit embeddings, clamped to [-1, 1]. Bitwise
/// identical vectors score exactly 1.0.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(cosine_unchecked(a.as_slice(), b.as_slice()))
}

pub(crate) fn cosine_unchecked(a: &[f32], b: &[f32]) -> f64 {
    cosine_with_norms(a, b, sq_norm(a), sq_norm(b))
}

/// Squared L2 norm, accumulated in f64.
pub(crate) fn sq_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

/// Cosine given both squared norms, for callers that precompute them.
pub(crate) fn cosine_with_norms(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    let dot = a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    finish_cosine(a, b, dot, na, nb)
}

/// Same value as [`cosine_with_norms`], summing only over `support`, the
/// ascending indices where `b` is nonzero.
pub(crate) fn cosine_sparse(a: &[f32], b: &[f32], support: &[u32], na: f64, nb: f64) -> f64 {
    let mut dot = 0.0f64;
    for &i in support {
        let i = i as usize;
        dot += f64::from(a[i]) * f64::from(b[i]);
    }
    finish_cosine(a, b, dot, na, nb)
}

fn finish_cosine(a: &[f32], b: &[f32], dot: f64, na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    let sim = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    // rounding can leave identical vectors just under 1
    if sim > 1.0 - 1e-6 && a == b {
        1.0
    } else {
        sim
    }
}

/// Maps text to a raw (not necessarily normalized) vector.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Embeds `text` with `provider` and unit-normalizes the result.
pub fn embed(text: &str, provider: &dyn EmbeddingProvider) -> Result<Embedding, EmbedError> {
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let raw = provider.embed_raw(text)?;
    if raw.len() != provider.dimension() {
        return Err(EmbedError::DimensionMismatch {
            expected: provider.dimension(),
            actual: raw.len(),
        });
    }
    Embedding::normalize(&raw)
}

/// Deterministic bag-of-tokens embedder: every token is FNV-1a hashed into
/// one of `dim` buckets and counted.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub const DEFAULT_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f32>, EmbedError> {
        let mut v = vec![0.0f32; self.dim];
        for tok in tokenize(text) {
            v[self.bucket(&tok)] += 1.0;
        }
        Ok(v)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
