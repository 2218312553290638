//! Path-level meta-cache.
//!
//! Stores routing decisions (embedding, all four path scores, chosen path)
//! and serves them to queries whose embedding is within cosine `tau` of a
//! stored one. Entries never carry answers. Lookup is an exact linear scan so
//! the returned entry is always the true nearest neighbour.

mod embedding;
mod snapshot;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

pub use embedding::{cosine, embed, EmbedError, Embedding, EmbeddingProvider, HashingEmbedder};
pub use snapshot::SnapshotError;

use crate::rules::{Path, PathScores};
use embedding::{cosine_sparse, sq_norm};

pub const DEFAULT_TAU: f64 = 0.90;
pub const DEFAULT_CAPACITY: usize = 10_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CacheError {
    #[error("dimension mismatch: cache holds {expected}-d embeddings, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cache capacity must be at least 1")]
    ZeroCapacity,
    #[error("tau must lie in (0, 1], got {0}")]
    InvalidTau(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub embedding: Embedding,
    pub scores: PathScores,
    pub chosen_path: Path,
    /// Priority order that was active when `chosen_path` was selected.
    pub priority_order: [Path; 4],
    pub insert_seq: u64,
    /// 0 when the entry has never been hit.
    pub last_hit_seq: u64,
}

#[derive(Debug)]
struct Slot {
    entry: CacheEntry,
    last_hit: AtomicU64,
    sq_norm: f64,
    /// Indices of nonzero components.
    support: Vec<u32>,
}

impl Slot {
    fn new(entry: CacheEntry) -> Self {
        Self {
            last_hit: AtomicU64::new(entry.last_hit_seq),
            sq_norm: sq_norm(entry.embedding.as_slice()),
            support: (0u32..)
                .zip(entry.embedding.as_slice())
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| i)
                .collect(),
            entry,
        }
    }

    fn snapshot(&self) -> CacheEntry {
        let mut e = self.entry.clone();
        e.last_hit_seq = self.last_hit.load(Ordering::SeqCst);
        e
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub insertions: u64,
    pub evictions: u64,
    pub size: usize,
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheHit {
    pub entry: CacheEntry,
    pub similarity: f64,
}

/// Checks that `tau` lies in (0, 1].
pub fn validate_tau(tau: f64) -> Result<f64, CacheError> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(tau)
    } else {
        Err(CacheError::InvalidTau(tau))
    }
}

#[derive(Debug)]
pub struct MetaCache {
    dim: usize,
    capacity: usize,
    slots: RwLock<Vec<Slot>>,
    seq: AtomicU64,
    hits: AtomicU64,
    misses: AtomicU64,
    insertions: AtomicU64,
    evictions: AtomicU64,
}

impl MetaCache {
    pub fn new(dim: usize, capacity: usize) -> Result<Self, CacheError> {
        if capacity == 0 {
            return Err(CacheError::ZeroCapacity);
        }
        Ok(Self {
            dim,
            capacity,
            slots: RwLock::new(Vec::new()),
            seq: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            insertions: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn next_seq(&self) -> u64 {
        self.seq.fetch_add(1, Ordering::SeqCst) + 1
    }

    fn check_dim(&self, z: &Embedding) -> Result<(), CacheError> {
        if z.dim() != self.dim {
            return Err(CacheError::DimensionMismatch {
                expected: self.dim,
                actual: z.dim(),
            });
        }
        Ok(())
    }

    /// Returns the most similar entry when its cosine to `z` is at least
    /// `tau`. Among equally similar entries the oldest insertion wins.
    pub fn lookup(&self, z: &Embedding, tau: f64) -> Result<Option<CacheHit>, CacheError> {
        self.check_dim(z)?;
        let slots = self.slots.read().expect("cache lock poisoned");
        let mut best: Option<(usize, f64)> = None;
        let zn = sq_norm(z.as_slice());
        for (i, slot) in slots.iter().enumerate() {
            let sim = cosine_sparse(
                z.as_slice(),
                slot.entry.embedding.as_slice(),
                &slot.support,
                zn,
                slot.sq_norm,
            );
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((i, sim));
            }
        }
        match best {
            Some((i, similarity)) if similarity >= tau => {
                self.hits.fetch_add(1, Ordering::SeqCst);
                slots[i].last_hit.store(self.next_seq(), Ordering::SeqCst);
                Ok(Some(CacheHit {
                    entry: slots[i].snapshot(),
                    similarity,
                }))
            }
            _ => {
                self.misses.fetch_add(1, Ordering::SeqCst);
                Ok(None)
            }
        }
    }

    /// Stores a decision. An entry with a bitwise-identical embedding is
    /// replaced in place; otherwise, at capacity, the least-recently-hit entry
    /// (oldest insertion on ties) is evicted first.
    pub fn insert(
        &self,
        z: Embedding,
        scores: PathScores,
        chosen: Path,
        priority_order: [Path; 4],
    ) -> Result<(), CacheError> {
        self.check_dim(&z)?;
        let mut slots = self.slots.write().expect("cache lock poisoned");
        self.insertions.fetch_add(1, Ordering::SeqCst);
        if let Some(slot) = slots.iter_mut().find(|s| s.entry.embedding == z) {
            slot.entry.scores = scores;
            slot.entry.chosen_path = chosen;
            slot.entry.priority_order = priority_order;
            return Ok(());
        }
        if slots.len() >= self.capacity {
            let victim = slots
                .iter()
                .enumerate()
                .min_by_key(|(_, s)| (s.last_hit.load(Ordering::SeqCst), s.entry.insert_seq))
                .map(|(i, _)| i)
                .expect("non-empty at capacity");
            slots.remove(victim);
            self.evictions.fetch_add(1, Ordering::SeqCst);
        }
        slots.push(Slot::new(CacheEntry {
            embedding: z,
            scores,
            chosen_path: chosen,
            priority_order,
            insert_seq: self.next_seq(),
            last_hit_seq: 0,
        }));
        Ok(())
    }

    /// Drops every entry; counters are kept.
    pub fn invalidate_all(&self) {
        self.slots.write().expect("cache lock poisoned").clear();
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            insertions: self.insertions.load(Ordering::SeqCst),
            evictions: self.evictions.load(Ordering::SeqCst),
            size: self.len(),
            capacity: self.capacity,
        }
    }

    /// Entries in insertion order.
    pub fn entries(&self) -> Vec<CacheEntry> {
        self.slots
            .read()
            .expect("cache lock poisoned")
            .iter()
            .map(Slot::snapshot)
            .collect()
    }
}
