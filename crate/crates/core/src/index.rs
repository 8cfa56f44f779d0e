//! The experience index: trajectories paired with key embeddings, exact
//! full-scan top-K retrieval, and a versioned on-disk format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "EXPRAGIX"
//! version    u32
//! dim        u32
//! count      u64
//! trailer    u64      byte length of the trailer
//! matrix     count * dim * f32
//! trailer    JSONL: manifest line, then one store record per entry
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{dot, EmbedError, Embedder, EmbeddingVector};
use crate::traj::{
    format_trajectory, Outcome, Split, TaskMeta, TrajError, TrajFormat, Trajectory, TrajectoryStore,
};

pub const INDEX_MAGIC: &[u8; 8] = b"EXPRAGIX";
pub const INDEX_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8;

/// Scores closer than this are treated as tied.
pub const TIE_EPSILON: f64 = 1e-9;

const EMBED_BATCH: usize = 32;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("index format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("duplicate trajectory id `{0}`")]
    DuplicateId(String),
    #[error("query dimension {query} does not match index dimension {index}")]
    DimensionMismatch { index: usize, query: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Traj(#[from] TrajError),
    #[error("unknown tie policy `{0}`")]
    UnknownTiePolicy(String),
}

// ---------------------------------------------------------------------------
// Build parameters
// ---------------------------------------------------------------------------

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    /// Keys are task descriptions (static retrieval).
    #[default]
    TaskDescription,
    /// Keys are chat-JSON serializations of whole trajectories (dynamic retrieval).
    FullTrajectoryJson,
}

impl KeyMode {
    pub fn key_text(&self, traj: &Trajectory) -> String {
        match self {
            KeyMode::TaskDescription => traj.task_description.clone(),
            KeyMode::FullTrajectoryJson => format_trajectory(traj, TrajFormat::ChatJson),
        }
    }
}

impl FromStr for KeyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "task" | "task_description" => Ok(KeyMode::TaskDescription),
            "full" | "full_trajectory_json" => Ok(KeyMode::FullTrajectoryJson),
            other => Err(format!(
                "unknown key mode `{other}` (expected task or full)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeClass {
    Success,
    Failure,
}

/// Which stored trajectories are admitted into an index. Empty `splits` or
/// `outcomes` sets admit everything on that axis.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexFilter {
    pub splits: BTreeSet<Split>,
    pub outcomes: BTreeSet<OutcomeClass>,
    pub exclude_ids: BTreeSet<String>,
}

impl IndexFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn splits(splits: impl IntoIterator<Item = Split>) -> Self {
        Self {
            splits: splits.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn with_outcomes(mut self, outcomes: impl IntoIterator<Item = OutcomeClass>) -> Self {
        self.outcomes = outcomes.into_iter().collect();
        self
    }

    pub fn admits(&self, traj: &Trajectory) -> bool {
        let class = if traj.is_success() {
            OutcomeClass::Success
        } else {
            OutcomeClass::Failure
        };
        (self.splits.is_empty() || self.splits.contains(&traj.meta.split))
            && (self.outcomes.is_empty() || self.outcomes.contains(&class))
            && !self.exclude_ids.contains(&traj.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub store: String,
    pub filter: IndexFilter,
    pub key_mode: KeyMode,
    pub embedder: String,
    pub dim: usize,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub traj_id: String,
    pub embedding: EmbeddingVector,
    pub outcome: Outcome,
    pub meta: TaskMeta,
    pub trajectory: Trajectory,
}

impl IndexEntry {
    fn new(trajectory: Trajectory, embedding: EmbeddingVector) -> Self {
        Self {
            traj_id: trajectory.id.clone(),
            outcome: trajectory
                .outcome
                .resolved()
                .unwrap_or_else(Outcome::failure),
            meta: trajectory.meta.clone(),
            embedding,
            trajectory,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub traj_id: String,
    pub score: f64,
    /// Position of the entry inside the index.
    pub entry: usize,
}

// ---------------------------------------------------------------------------
// Tie policies
// ---------------------------------------------------------------------------

/// Orders a group of entries whose scores are tied.
pub trait TieBreak: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// `group` arrives sorted by ascending trajectory id; `rank` is the
    /// position of the group in the descending score order.
    fn order(&self, group: &mut [usize], seed: u64, rank: usize);
}

/// Ascending trajectory id among tied scores.
#[derive(Debug, Clone, Copy, Default)]
pub struct Lexicographic;

impl TieBreak for Lexicographic {
    fn name(&self) -> &'static str {
        "lexicographic"
    }

    fn order(&self, _group: &mut [usize], _seed: u64, _rank: usize) {}
}

/// Fisher–Yates permutation of tied ids driven by ChaCha8 seeded from the
/// tie seed and the group rank.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeededShuffle;

impl TieBreak for SeededShuffle {
    fn name(&self) -> &'static str {
        "seeded_shuffle"
    }

    fn order(&self, group: &mut [usize], seed: u64, rank: usize) {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for i in (1..group.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            group.swap(i, j);
        }
    }
}

// ---------------------------------------------------------------------------
// Index
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ExperienceIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
    manifest: IndexManifest,
}

/// Builds an index over every admitted trajectory of `store`. An empty result
/// is a valid (empty) index.
pub fn build_index(
    store: &TrajectoryStore,
    filter: &IndexFilter,
    key_mode: KeyMode,
    embedder: &dyn Embedder,
) -> Result<ExperienceIndex, IndexError> {
    let admitted: Vec<&Trajectory> = store
        .trajectories
        .iter()
        .filter(|t| filter.admits(t))
        .collect();
    let mut seen = BTreeSet::new();
    for t in &admitted {
        if !seen.insert(t.id.as_str()) {
            return Err(IndexError::DuplicateId(t.id.clone()));
        }
    }

    let keys: Vec<String> = admitted.iter().map(|t| key_mode.key_text(t)).collect();
    let mut embeddings = Vec::with_capacity(keys.len());
    for chunk in keys.chunks(EMBED_BATCH) {
        let refs: Vec<&str> = chunk.iter().map(String::as_str).collect();
        embeddings.extend(embedder.embed_batch(&refs)?);
    }

    let dim = embeddings
        .first()
        .map(EmbeddingVector::dim)
        .or_else(|| embedder.dim())
        .unwrap_or(0);
    if let Some(bad) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(IndexError::DimensionMismatch {
            index: dim,
            query: bad.dim(),
        });
    }

    let entries: Vec<IndexEntry> = admitted
        .into_iter()
        .cloned()
        .zip(embeddings)
        .map(|(t, e)| IndexEntry::new(t, e))
        .collect();
    let manifest = IndexManifest {
        format_version: INDEX_VERSION,
        store: store.source.clone(),
        filter: filter.clone(),
        key_mode,
        embedder: embedder.id(),
        dim,
        entries: entries.len(),
    };
    Ok(ExperienceIndex {
        entries,
        dim,
        manifest,
    })
}

impl ExperienceIndex {
    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn entry(&self, traj_id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.traj_id == traj_id)
    }

    /// Exact top-`k` by dot product against a query embedding. Entries whose
    /// id is in `exclude` are skipped.
    pub fn search(
        &self,
        query: &EmbeddingVector,
        k: usize,
        ties: &dyn TieBreak,
        tie_seed: u64,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<Hit>, IndexError> {
        if k == 0 || self.entries.is_empty() {
            return Ok(Vec::new());
        }
        if query.dim() != self.dim {
            return Err(IndexError::DimensionMismatch {
                index: self.dim,
                query: query.dim(),
            });
        }
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| !exclude.contains(&e.traj_id))
            .map(|(i, e)| (i, dot(e.embedding.values(), query.values())))
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.entries[a.0].traj_id.cmp(&self.entries[b.0].traj_id))
        });

        let mut hits = Vec::with_capacity(k.min(scored.len()));
        let mut start = 0;
        let mut rank = 0;
        while start < scored.len() && hits.len() < k {
            let mut end = start + 1;
            while end < scored.len() && scored[end - 1].1 - scored[end].1 < TIE_EPSILON {
                end += 1;
            }
            let group = &scored[start..end];
            let mut order: Vec<usize> = (0..group.len()).collect();
            order.sort_by(|a, b| {
                self.entries[group[*a].0]
                    .traj_id
                    .cmp(&self.entries[group[*b].0].traj_id)
            });
            ties.order(&mut order, tie_seed, rank);
            for pos in order {
                let (entry, score) = group[pos];
                hits.push(Hit {
                    traj_id: self.entries[entry].traj_id.clone(),
                    score,
                    entry,
                });
            }
            start = end;
            rank += 1;
        }
        hits.truncate(k);
        Ok(hits)
    }

    /// Embeds `query` and returns the top-`k` entries.
    pub fn retrieve_top_k(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn Embedder,
        ties: &dyn TieBreak,
        tie_seed: u64,
    ) -> Result<Vec<Hit>, IndexError> {
        self.retrieve_excluding(query, k, embedder, ties, tie_seed, &BTreeSet::new())
    }

    pub fn retrieve_excluding(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn Embedder,
        ties: &dyn TieBreak,
        tie_seed: u64,
        exclude: &BTreeSet<String>,
    ) -> Result<Vec<Hit>, IndexError> {
        if k == 0 || self.entries.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(d) = embedder.dim() {
            if d != self.dim {
                return Err(IndexError::DimensionMismatch {
                    index: self.dim,
                    query: d,
                });
            }
        }
        let q = embedder.embed(query)?;
        self.search(&q, k, ties, tie_seed, exclude)
    }

    // -----------------------------------------------------------------------
    // Persistence
    // -----------------------------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut trailer = serde_json::to_string(&self.manifest).expect("manifest serializes");
        trailer.push('\n');
        for e in &self.entries {
            trailer.push_str(&e.trajectory.to_record());
            trailer.push('\n');
        }

        let mut out =
            Vec::with_capacity(HEADER_LEN + self.entries.len() * self.dim * 4 + trailer.len());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
        for e in &self.entries {
            for v in e.embedding.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(trailer.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < HEADER_LEN {
            return Err(IndexError::Corrupt(format!(
                "file is {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..8] != INDEX_MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(8);
        if version != INDEX_VERSION {
            return Err(IndexError::Version {
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let dim = u32_at(12) as usize;
        let count = u64_at(16) as usize;
        let trailer_len = u64_at(24) as usize;
        let matrix_len = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| IndexError::Corrupt("matrix size overflows".into()))?;
        let expected = HEADER_LEN
            .checked_add(matrix_len)
            .and_then(|n| n.checked_add(trailer_len))
            .ok_or_else(|| IndexError::Corrupt("file size overflows".into()))?;
        if bytes.len() != expected {
            return Err(IndexError::Corrupt(format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }

        let matrix = &bytes[HEADER_LEN..HEADER_LEN + matrix_len];
        let trailer = std::str::from_utf8(&bytes[HEADER_LEN + matrix_len..])
            .map_err(|e| IndexError::Corrupt(format!("trailer is not UTF-8: {e}")))?;
        let mut lines = trailer.lines();
        let manifest: IndexManifest = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| IndexError::Corrupt("missing manifest".into()))?,
        )
        .map_err(|e| IndexError::Corrupt(format!("manifest: {e}")))?;
        if manifest.entries != count || manifest.dim != dim {
            return Err(IndexError::Corrupt(format!(
                "manifest says {} entries of dim {}, header says {count} of dim {dim}",
                manifest.entries, manifest.dim
            )));
        }

        let mut entries = Vec::with_capacity(count);
        for (i, row) in matrix.chunks_exact(dim.max(1) * 4).take(count).enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| IndexError::Corrupt(format!("missing record for entry {i}")))?;
            let traj = Trajectory::from_record(line)
                .map_err(|e| IndexError::Corrupt(format!("entry {i}: {e}")))?;
            let values = row
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            entries.push(IndexEntry::new(
                traj,
                EmbeddingVector::from_unit_values(values),
            ));
        }
        if entries.len() != count {
            return Err(IndexError::Corrupt(format!(
                "read {} of {count} entries",
                entries.len()
            )));
        }
        if lines.next().is_some() {
            return Err(IndexError::Corrupt(
                "trailing records after last entry".into(),
            ));
        }
        Ok(Self {
            entries,
            dim,
            manifest,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
