//! Append-oriented vector memory over edit descriptors with exact top-k
//! retrieval and JSONL snapshots.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::EditDescriptor;
use crate::embed::{dot, EmbedError, Embedder, EmbedderFingerprint, Vector};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum MemoryError {
    #[error("descriptor `{0}` has an empty statement")]
    EmptyStatement(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("vector dimension {got} does not match bank dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("snapshot embedder {snapshot} does not match {current}")]
    FingerprintMismatch {
        snapshot: Box<EmbedderFingerprint>,
        current: Box<EmbedderFingerprint>,
    },
    #[error("snapshot dimension {snapshot} does not match embedder dimension {embedder}")]
    SnapshotDimension { snapshot: usize, embedder: usize },
    #[error("corrupt snapshot at byte offset {offset} (line {line}): {message}")]
    Corrupt {
        offset: usize,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("snapshot I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub entry_id: u64,
    pub descriptor: EditDescriptor,
    pub vector: Vector,
}

impl MemoryEntry {
    /// Insertion sequence number; equal to the entry id.
    pub fn seq(&self) -> u64 {
        self.entry_id
    }
}

/// One ranked hit. The stored vector is not copied out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEntry {
    pub entry_id: u64,
    pub seq: u64,
    pub descriptor: EditDescriptor,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entries: Vec<RetrievedEntry>,
    pub k_requested: usize,
}

impl RetrievalResult {
    pub fn top(&self) -> Option<&RetrievedEntry> {
        self.entries.first()
    }

    pub fn statements(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| e.descriptor.statement.clone())
            .collect()
    }

    pub fn contains(&self, entry_id: u64) -> bool {
        self.entries.iter().any(|e| e.entry_id == entry_id)
    }
}

/// A descriptor whose embedding has been computed but which is not yet in
/// the bank. Lets callers embed outside a write lock.
#[derive(Debug, Clone)]
pub struct PreparedEntry {
    descriptor: EditDescriptor,
    vector: Vector,
}

/// Higher score first, then older entry. Scores are finite, and `-0.0` ties
/// with `0.0`.
fn rank_order(a: &(f64, u64), b: &(f64, u64)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

pub struct MemoryBank {
    embedder: Arc<dyn Embedder>,
    entries: Vec<MemoryEntry>,
    next_id: u64,
}

impl std::fmt::Debug for MemoryBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryBank")
            .field("embedder", &self.embedder.fingerprint())
            .field("len", &self.entries.len())
            .field("next_id", &self.next_id)
            .finish()
    }
}

impl MemoryBank {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            embedder,
            entries: Vec::new(),
            next_id: 0,
        }
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn get(&self, entry_id: u64) -> Option<&MemoryEntry> {
        self.entries
            .binary_search_by_key(&entry_id, |e| e.entry_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn prepare(&self, descriptor: EditDescriptor) -> Result<PreparedEntry, MemoryError> {
        if descriptor.statement.trim().is_empty() {
            return Err(MemoryError::EmptyStatement(descriptor.id));
        }
        let vector = self.embedder.embed(&descriptor.statement)?;
        Ok(PreparedEntry { descriptor, vector })
    }

    /// Embeds several descriptors in one embedder call.
    pub fn prepare_batch(
        &self,
        descriptors: Vec<EditDescriptor>,
    ) -> Result<Vec<PreparedEntry>, MemoryError> {
        if let Some(d) = descriptors.iter().find(|d| d.statement.trim().is_empty()) {
            return Err(MemoryError::EmptyStatement(d.id.clone()));
        }
        let texts: Vec<&str> = descriptors.iter().map(|d| d.statement.as_str()).collect();
        let vectors = self.embedder.embed_batch(&texts)?;
        Ok(descriptors
            .into_iter()
            .zip(vectors)
            .map(|(descriptor, vector)| PreparedEntry { descriptor, vector })
            .collect())
    }

    pub fn commit(&mut self, prepared: PreparedEntry) -> Result<u64, MemoryError> {
        if prepared.vector.dim() != self.dim() {
            return Err(MemoryError::DimensionMismatch {
                expected: self.dim(),
                got: prepared.vector.dim(),
            });
        }
        let entry_id = self.next_id;
        self.next_id += 1;
        self.entries.push(MemoryEntry {
            entry_id,
            descriptor: prepared.descriptor,
            vector: prepared.vector,
        });
        Ok(entry_id)
    }

    /// Embeds the descriptor statement and appends it.
    pub fn add_edit(&mut self, descriptor: EditDescriptor) -> Result<u64, MemoryError> {
        let prepared = self.prepare(descriptor)?;
        self.commit(prepared)
    }

    /// Removes an entry. Ids of other entries are unaffected and removed ids
    /// are never reused.
    pub fn remove(&mut self, entry_id: u64) -> Option<MemoryEntry> {
        let idx = self
            .entries
            .binary_search_by_key(&entry_id, |e| e.entry_id)
            .ok()?;
        Some(self.entries.remove(idx))
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Result<RetrievalResult, MemoryError> {
        if k == 0 {
            return Err(MemoryError::InvalidK);
        }
        if self.entries.is_empty() {
            return Ok(RetrievalResult {
                entries: Vec::new(),
                k_requested: k,
            });
        }
        let q = self.embedder.embed(query)?;
        self.retrieve_vector(&q, k, |_| false)
    }

    /// Exact top-k by dot product against `query`, skipping entries for which
    /// `exclude` returns true.
    pub fn retrieve_vector(
        &self,
        query: &Vector,
        k: usize,
        exclude: impl Fn(&MemoryEntry) -> bool,
    ) -> Result<RetrievalResult, MemoryError> {
        if k == 0 {
            return Err(MemoryError::InvalidK);
        }
        if query.dim() != self.dim() {
            return Err(MemoryError::DimensionMismatch {
                expected: self.dim(),
                got: query.dim(),
            });
        }
        let mut scored: Vec<(f64, u64, usize)> = Vec::with_capacity(self.entries.len());
        for (idx, entry) in self.entries.iter().enumerate() {
            if exclude(entry) {
                continue;
            }
            scored.push((dot(query, &entry.vector)?, entry.entry_id, idx));
        }
        let cmp =
            |a: &(f64, u64, usize), b: &(f64, u64, usize)| rank_order(&(a.0, a.1), &(b.0, b.1));
        let take = k.min(scored.len());
        if take < scored.len() && take > 0 {
            scored.select_nth_unstable_by(take - 1, cmp);
            scored.truncate(take);
        }
        scored.sort_unstable_by(cmp);
        scored.truncate(take);
        let entries = scored
            .into_iter()
            .map(|(score, entry_id, idx)| RetrievedEntry {
                entry_id,
                seq: entry_id,
                descriptor: self.entries[idx].descriptor.clone(),
                score,
            })
            .collect();
        Ok(RetrievalResult {
            entries,
            k_requested: k,
        })
    }

    /// Writes a header line followed by one line per entry.
    pub fn snapshot(&self, path: &Path) -> Result<(), MemoryError> {
        let io_err = |source| MemoryError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        let header = SnapshotHeader {
            version: SNAPSHOT_VERSION,
            dim: self.dim(),
            embedder: self.embedder.fingerprint(),
            count: self.entries.len(),
            next_id: self.next_id,
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&header).expect("header serializes")
        )
        .map_err(io_err)?;
        for entry in &self.entries {
            writeln!(
                w,
                "{}",
                serde_json::to_string(entry).expect("entry serializes")
            )
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    /// Restores a bank written by [`MemoryBank::snapshot`]. The embedder must
    /// have the same fingerprint as the one that produced the snapshot.
    pub fn restore(path: &Path, embedder: Arc<dyn Embedder>) -> Result<Self, MemoryError> {
        let text = fs::read_to_string(path).map_err(|source| MemoryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::restore_from_str(&text, embedder)
    }

    pub fn restore_from_str(text: &str, embedder: Arc<dyn Embedder>) -> Result<Self, MemoryError> {
        let mut offset = 0usize;
        let mut lines = text.split_inclusive('\n').enumerate().map(|(i, l)| {
            let start = offset;
            offset += l.len();
            (i + 1, start, l.trim_end_matches(['\n', '\r']))
        });
        let corrupt = |offset, line, message: String| MemoryError::Corrupt {
            offset,
            line,
            message,
        };

        let (line, start, raw) = lines
            .next()
            .ok_or_else(|| corrupt(0, 1, "missing header".into()))?;
        let header: SnapshotHeader =
            serde_json::from_str(raw).map_err(|e| corrupt(start, line, format!("header: {e}")))?;
        if header.version != SNAPSHOT_VERSION {
            return Err(corrupt(
                start,
                line,
                format!("unsupported version {}", header.version),
            ));
        }
        let current = embedder.fingerprint();
        if header.dim != current.dim || header.embedder.dim != current.dim {
            return Err(MemoryError::SnapshotDimension {
                snapshot: header.dim,
                embedder: current.dim,
            });
        }
        if header.embedder != current {
            return Err(MemoryError::FingerprintMismatch {
                snapshot: Box::new(header.embedder),
                current: Box::new(current),
            });
        }

        let mut entries: Vec<MemoryEntry> = Vec::with_capacity(header.count);
        let mut last_offset = start + raw.len();
        let mut last_line = line;
        for (line, start, raw) in lines {
            last_offset = start;
            last_line = line;
            if raw.trim().is_empty() {
                continue;
            }
            let entry: MemoryEntry =
                serde_json::from_str(raw).map_err(|e| corrupt(start, line, e.to_string()))?;
            if entry.vector.dim() != header.dim {
                return Err(corrupt(
                    start,
                    line,
                    format!("vector dimension {} != {}", entry.vector.dim(), header.dim),
                ));
            }
            if entry.vector.values().iter().any(|v| !v.is_finite()) {
                return Err(corrupt(start, line, "non-finite vector entry".into()));
            }
            if let Some(prev) = entries.last() {
                if entry.entry_id <= prev.entry_id {
                    return Err(corrupt(
                        start,
                        line,
                        format!("entry id {} out of order", entry.entry_id),
                    ));
                }
            }
            if entry.entry_id >= header.next_id {
                return Err(corrupt(
                    start,
                    line,
                    format!("entry id {} >= next_id", entry.entry_id),
                ));
            }
            entries.push(entry);
        }
        if entries.len() != header.count {
            return Err(corrupt(
                last_offset,
                last_line,
                format!(
                    "header count {} but {} entries",
                    header.count,
                    entries.len()
                ),
            ));
        }
        Ok(Self {
            embedder,
            entries,
            next_id: header.next_id,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SnapshotHeader {
    version: u32,
    dim: usize,
    embedder: EmbedderFingerprint,
    count: usize,
    next_id: u64,
}
