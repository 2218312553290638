//! Binary cache snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PRMC" | format u16 | dim u32 | capacity u64
//! hits u64 | misses u64 | insertions u64 | evictions u64 | next_seq u64 | count u64
//! count x { dim x f32 | 4 x i64 scores (db, doc, hybrid, llm) | chosen u8
//!           | 4 x u8 priority | insert_seq u64 | last_hit_seq u64 }
//! ```

use std::io::{self, Read, Write};
use std::sync::atomic::Ordering;

use super::{CacheError, CacheStats, Embedding, MetaCache, Slot};
use crate::cache::CacheEntry;
use crate::rules::{is_permutation, Path, PathScores};

const MAGIC: &[u8; 4] = b"PRMC";
const FORMAT: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("snapshot I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a cache snapshot (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot format {0}")]
    Format(u16),
    #[error("snapshot dimension {found} does not match expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("corrupt snapshot: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_path(r: &mut impl Read) -> Result<Path, SnapshotError> {
    let tag = read_u8(r)?;
    Path::from_tag(tag).ok_or_else(|| SnapshotError::Corrupt(format!("bad path tag {tag}")))
}

impl MetaCache {
    pub fn write_snapshot(&self, w: &mut impl Write) -> Result<(), SnapshotError> {
        let slots = self.slots.read().expect("cache lock poisoned");
        let stats = CacheStats {
            size: slots.len(),
            ..self.stats_without_size()
        };
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        for v in [stats.hits, stats.misses, stats.insertions, stats.evictions] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.seq.load(Ordering::SeqCst).to_le_bytes())?;
        w.write_all(&(slots.len() as u64).to_le_bytes())?;
        for slot in slots.iter() {
            let e = slot.snapshot();
            for x in e.embedding.as_slice() {
                w.write_all(&x.to_le_bytes())?;
            }
            for s in e.scores.values() {
                w.write_all(&s.to_le_bytes())?;
            }
            w.write_all(&[e.chosen_path.tag()])?;
            w.write_all(&e.priority_order.map(Path::tag))?;
            w.write_all(&e.insert_seq.to_le_bytes())?;
            w.write_all(&e.last_hit_seq.to_le_bytes())?;
        }
        Ok(())
    }

    fn stats_without_size(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            insertions: self.insertions.load(Ordering::SeqCst),
            evictions: self.evictions.load(Ordering::SeqCst),
            size: 0,
            capacity: self.capacity,
        }
    }

    /// Restores a cache, rejecting snapshots whose dimension differs from
    /// `expected_dim` when one is given.
    pub fn read_snapshot(r: &mut impl Read, expected_dim: Option<usize>) -> Result<MetaCache, SnapshotError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let mut fb = [0u8; 2];
        r.read_exact(&mut fb)?;
        let format = u16::from_le_bytes(fb);
        if format != FORMAT {
            return Err(SnapshotError::Format(format));
        }
        let mut db = [0u8; 4];
        r.read_exact(&mut db)?;
        let dim = u32::from_le_bytes(db) as usize;
        if let Some(expected) = expected_dim {
            if expected != dim {
                return Err(SnapshotError::DimensionMismatch { expected, found: dim });
            }
        }
        let capacity = read_u64(r)? as usize;
        let cache = MetaCache::new(dim, capacity)?;
        cache.hits.store(read_u64(r)?, Ordering::SeqCst);
        cache.misses.store(read_u64(r)?, Ordering::SeqCst);
        cache.insertions.store(read_u64(r)?, Ordering::SeqCst);
        cache.evictions.store(read_u64(r)?, Ordering::SeqCst);
        cache.seq.store(read_u64(r)?, Ordering::SeqCst);
        let count = read_u64(r)? as usize;
        if count > capacity {
            return Err(SnapshotError::Corrupt(format!(
                "{count} entries exceed capacity {capacity}"
            )));
        }
        let mut slots = Vec::with_capacity(count);
        for _ in 0..count {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                v.push(f32::from_le_bytes(b));
            }
            let embedding =
                Embedding::from_unit(v).map_err(|e| SnapshotError::Corrupt(format!("entry embedding: {e}")))?;
            let mut scores = [0i64; 4];
            for s in &mut scores {
                *s = read_u64(r)? as i64;
            }
            let chosen_path = read_path(r)?;
            let priority_order = [read_path(r)?, read_path(r)?, read_path(r)?, read_path(r)?];
            if !is_permutation(&priority_order) {
                return Err(SnapshotError::Corrupt("priority order is not a permutation".into()));
            }
            let insert_seq = read_u64(r)?;
            let last_hit_seq = read_u64(r)?;
            slots.push(Slot::new(CacheEntry {
                embedding,
                scores: PathScores::from_values(scores),
                chosen_path,
                priority_order,
                insert_seq,
                last_hit_seq,
            }));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(SnapshotError::Corrupt("trailing bytes".into()));
        }
        *cache.slots.write().expect("cache lock poisoned") = slots;
        Ok(cache)
    }
}
