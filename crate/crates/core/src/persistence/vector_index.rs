//! Exact cosine top-k index with optional JSONL persistence.

use std::collections::HashMap;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use super::jsonl::{JsonlLog, LogError};
use crate::domain::EmbeddingVector;
use crate::encoder::cosine_slices;
use crate::parallel::{map_ordered, ExecMode};

/// Which entry wins among equal scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    /// Lower insertion sequence first (earliest enrollment).
    OldestFirst,
    /// Higher insertion sequence first (most recent turn).
    NewestFirst,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IndexError {
    #[error("dimension mismatch: index holds {expected}-d vectors, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero or non-finite vector")]
    ZeroVector,
    #[error("index storage failed: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub key: String,
    pub scope: String,
    pub vector: EmbeddingVector,
    pub sequence: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredKey {
    pub key: String,
    pub scope: String,
    pub score: f64,
    pub sequence: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct VectorRecord {
    key: String,
    scope: String,
    vector: EmbeddingVector,
}

#[derive(Debug, Default)]
struct Inner {
    dim: Option<usize>,
    entries: Vec<IndexEntry>,
    positions: HashMap<String, usize>,
    next_sequence: u64,
}

impl Inner {
    fn insert(&mut self, key: &str, scope: &str, vector: EmbeddingVector) -> Result<IndexEntry, IndexError> {
        match self.dim {
            Some(d) if d != vector.dim() => {
                return Err(IndexError::DimensionMismatch { expected: d, actual: vector.dim() })
            }
            _ => {}
        }
        if !vector.is_finite() || vector.norm() < 1e-12 {
            return Err(IndexError::ZeroVector);
        }
        self.dim = Some(vector.dim());
        let entry = match self.positions.get(key) {
            Some(&pos) => {
                let e = &mut self.entries[pos];
                e.vector = vector;
                e.scope = scope.to_string();
                e.clone()
            }
            None => {
                let e =
                    IndexEntry { key: key.to_string(), scope: scope.to_string(), vector, sequence: self.next_sequence };
                self.next_sequence += 1;
                self.positions.insert(key.to_string(), self.entries.len());
                self.entries.push(e.clone());
                e
            }
        };
        Ok(entry)
    }
}

/// Exhaustive cosine index. Re-inserting a key replaces its vector but keeps
/// its original sequence number.
#[derive(Debug)]
pub struct VectorIndex {
    tie_break: TieBreak,
    mode: ExecMode,
    inner: RwLock<Inner>,
    log: Option<JsonlLog<VectorRecord>>,
}

impl VectorIndex {
    pub fn in_memory(tie_break: TieBreak) -> Self {
        Self { tie_break, mode: ExecMode::default(), inner: RwLock::new(Inner::default()), log: None }
    }

    /// Opens `path`, replaying every committed record in order.
    pub fn open(path: &Path, tie_break: TieBreak, fsync: bool) -> Result<Self, LogError> {
        let (log, records) = JsonlLog::<VectorRecord>::open(path, fsync)?;
        let mut inner = Inner::default();
        for (line, rec) in records.into_iter().enumerate() {
            inner.insert(&rec.key, &rec.scope, rec.vector).map_err(|e| LogError::Corrupt {
                path: path.to_path_buf(),
                line: line + 1,
                message: e.to_string(),
            })?;
        }
        Ok(Self { tie_break, mode: ExecMode::default(), inner: RwLock::new(inner), log: Some(log) })
    }

    pub fn with_mode(mut self, mode: ExecMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn len(&self) -> usize {
        self.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> Option<usize> {
        self.read().dim
    }

    pub fn get(&self, key: &str) -> Option<IndexEntry> {
        let inner = self.read();
        inner.positions.get(key).map(|&p| inner.entries[p].clone())
    }

    /// Inserts or replaces `key`. The stored vector is quantized to the
    /// persisted precision so that a reload reproduces it exactly.
    pub fn upsert(&self, key: &str, scope: &str, vector: EmbeddingVector) -> Result<IndexEntry, IndexError> {
        let vector = vector.quantized();
        let mut inner = self.inner.write().unwrap_or_else(|e| e.into_inner());
        // validate before logging so the file never holds a record replay would reject
        if let Some(d) = inner.dim {
            if d != vector.dim() {
                return Err(IndexError::DimensionMismatch { expected: d, actual: vector.dim() });
            }
        }
        if !vector.is_finite() || vector.norm() < 1e-12 {
            return Err(IndexError::ZeroVector);
        }
        if let Some(log) = &self.log {
            let rec = VectorRecord { key: key.to_string(), scope: scope.to_string(), vector: vector.clone() };
            log.append(&rec).map_err(|e| IndexError::Storage(e.to_string()))?;
        }
        inner.insert(key, scope, vector)
    }

    /// Top-`k` entries by cosine similarity to `probe`, restricted to `scope`
    /// when given. Sorted by descending score, then by the tie-break rule.
    pub fn query(&self, probe: &EmbeddingVector, scope: Option<&str>, k: usize) -> Result<Vec<ScoredKey>, IndexError> {
        let inner = self.read();
        if let Some(d) = inner.dim {
            if d != probe.dim() {
                return Err(IndexError::DimensionMismatch { expected: d, actual: probe.dim() });
            }
        }
        if k == 0 || inner.entries.is_empty() {
            return Ok(Vec::new());
        }
        if !probe.is_finite() || probe.norm() < 1e-12 {
            return Err(IndexError::ZeroVector);
        }
        let scored: Vec<Option<(usize, f64)>> = map_ordered(&inner.entries, self.mode, |e| {
            if scope.is_some_and(|s| s != e.scope) {
                return None;
            }
            let score = cosine_slices(probe.as_slice(), e.vector.as_slice()).ok()?;
            Some((e.sequence as usize, score))
        });
        let mut hits: Vec<(usize, f64, usize)> =
            scored.into_iter().enumerate().filter_map(|(pos, s)| s.map(|(seq, score)| (pos, score, seq))).collect();
        let tie = self.tie_break;
        let cmp = |a: &(usize, f64, usize), b: &(usize, f64, usize)| {
            b.1.total_cmp(&a.1).then_with(|| match tie {
                TieBreak::OldestFirst => a.2.cmp(&b.2),
                TieBreak::NewestFirst => b.2.cmp(&a.2),
            })
        };
        if k < hits.len() {
            hits.select_nth_unstable_by(k - 1, cmp);
            hits.truncate(k);
        }
        hits.sort_by(cmp);
        Ok(hits
            .into_iter()
            .map(|(pos, score, _)| {
                let e = &inner.entries[pos];
                ScoredKey { key: e.key.clone(), scope: e.scope.clone(), score, sequence: e.sequence }
            })
            .collect())
    }

    /// Snapshot of all entries in insertion order.
    pub fn entries(&self) -> Vec<IndexEntry> {
        self.read().entries.clone()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }
}
