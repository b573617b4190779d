//! The demonstration repository: labeled utterances from several corpora
//! with their embeddings, and exact top-k cosine retrieval by linear scan.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, Embedder};
use crate::corpus::Corpus;

pub const DEFAULT_EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("embedding batch starting at entry {start} ({len} texts) failed: {source}")]
    Embedder {
        start: usize,
        len: usize,
        #[source]
        source: ClientError,
    },
    #[error("query embedding failed: {0}")]
    QueryEmbedding(#[source] ClientError),
    #[error("entry {at}: vector dimension {found} differs from repository dimension {expected}")]
    DimensionMismatch { at: usize, expected: usize, found: usize },
    #[error("entry {at}: vector has zero norm or non-finite components")]
    DegenerateVector { at: usize },
    #[error("query vector has zero norm or non-finite components")]
    DegenerateQuery,
    #[error("duplicate entry ({source_name}, {dialogue_id}, {position})")]
    DuplicateEntry {
        source_name: String,
        dialogue_id: String,
        position: usize,
    },
    #[error("corpus {corpus}: conversation {dialogue_id:?} utterance {position} has no label")]
    Unlabeled {
        corpus: String,
        dialogue_id: String,
        position: usize,
    },
    #[error("embedder returned {found} vectors for {expected} texts")]
    CountMismatch { expected: usize, found: usize },
    #[error("no eligible entries to retrieve from")]
    NoEligibleEntries,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoEntry {
    pub text: String,
    pub label: String,
    pub source: String,
    pub dialogue_id: String,
    pub position: usize,
    pub vector: Vec<f32>,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Cosine similarity accumulated in f64 and clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

/// `(source, dialogue_id)` pairs that must not be returned.
pub type Exclusion = HashSet<(String, String)>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalResult<'a> {
    pub entry: &'a RepoEntry,
    /// Insertion index of the entry.
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repository {
    entries: Vec<RepoEntry>,
    norms: Vec<f64>,
    embed_dim: usize,
    embedder_id: String,
}

impl Repository {
    pub fn new(entries: Vec<RepoEntry>, embed_dim: usize, embedder_id: impl Into<String>) -> Result<Self, RetrievalError> {
        let embed_dim = entries.first().map_or(embed_dim, |e| e.vector.len());
        let mut keys = HashSet::new();
        let mut norms = Vec::with_capacity(entries.len());
        for (at, e) in entries.iter().enumerate() {
            if e.vector.len() != embed_dim {
                return Err(RetrievalError::DimensionMismatch {
                    at,
                    expected: embed_dim,
                    found: e.vector.len(),
                });
            }
            let n = norm(&e.vector);
            if !(n.is_finite() && n > 0.0) {
                return Err(RetrievalError::DegenerateVector { at });
            }
            norms.push(n);
            if !keys.insert((e.source.as_str(), e.dialogue_id.as_str(), e.position)) {
                return Err(RetrievalError::DuplicateEntry {
                    source_name: e.source.clone(),
                    dialogue_id: e.dialogue_id.clone(),
                    position: e.position,
                });
            }
        }
        Ok(Repository {
            entries,
            norms,
            embed_dim,
            embedder_id: embedder_id.into(),
        })
    }

    pub fn entries(&self) -> &[RepoEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    /// Top `k` entries by cosine similarity to `query`, ties broken by
    /// insertion order, skipping excluded dialogues.
    pub fn top_k(&self, query: &[f32], k: usize, exclusion: Option<&Exclusion>) -> Result<Vec<RetrievalResult<'_>>, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::ZeroK);
        }
        if query.len() != self.embed_dim {
            return Err(RetrievalError::DimensionMismatch {
                at: usize::MAX,
                expected: self.embed_dim,
                found: query.len(),
            });
        }
        let qn = norm(query);
        if !(qn.is_finite() && qn > 0.0) {
            return Err(RetrievalError::DegenerateQuery);
        }
        let excluded = |e: &RepoEntry| {
            exclusion.is_some_and(|ex| ex.contains(&(e.source.clone(), e.dialogue_id.clone())))
        };

        // Kept sorted by (score desc, index asc); scanning in index order
        // means an equal score never displaces an earlier entry.
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let mut eligible = 0usize;
        for (i, (e, en)) in self.entries.iter().zip(&self.norms).enumerate() {
            if excluded(e) {
                continue;
            }
            eligible += 1;
            let score = (dot(query, &e.vector) / (qn * en)).clamp(-1.0, 1.0);
            if best.len() == k && score <= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|(s, _)| *s >= score);
            best.insert(pos, (score, i));
            best.truncate(k);
        }
        if eligible == 0 {
            return Err(RetrievalError::NoEligibleEntries);
        }
        Ok(best
            .into_iter()
            .map(|(score, index)| RetrievalResult {
                entry: &self.entries[index],
                index,
                score,
            })
            .collect())
    }
}

/// One entry per labeled utterance of every corpus, embedded in batches of
/// `batch_size` texts.
pub fn build_repository(corpora: &[&Corpus], embedder: &dyn Embedder, batch_size: usize) -> Result<Repository, RetrievalError> {
    let mut pending: Vec<RepoEntry> = Vec::new();
    for corpus in corpora {
        for conv in &corpus.conversations {
            for u in &conv.utterances {
                let label = u.label.clone().ok_or_else(|| RetrievalError::Unlabeled {
                    corpus: corpus.name.clone(),
                    dialogue_id: conv.id.clone(),
                    position: u.index,
                })?;
                pending.push(RepoEntry {
                    text: u.text.clone(),
                    label,
                    source: corpus.name.clone(),
                    dialogue_id: conv.id.clone(),
                    position: u.index,
                    vector: Vec::new(),
                });
            }
        }
    }
    let batch_size = batch_size.max(1);
    let mut dim = embedder.dim();
    for (b, chunk) in pending.chunks_mut(batch_size).enumerate() {
        let start = b * batch_size;
        let texts: Vec<String> = chunk.iter().map(|e| e.text.clone()).collect();
        let vectors = embedder.embed(&texts).map_err(|source| RetrievalError::Embedder {
            start,
            len: texts.len(),
            source,
        })?;
        if vectors.len() != texts.len() {
            return Err(RetrievalError::CountMismatch {
                expected: texts.len(),
                found: vectors.len(),
            });
        }
        for (i, (entry, v)) in chunk.iter_mut().zip(vectors).enumerate() {
            let expected = *dim.get_or_insert(v.len());
            if v.len() != expected {
                return Err(RetrievalError::DimensionMismatch {
                    at: start + i,
                    expected,
                    found: v.len(),
                });
            }
            entry.vector = v;
        }
    }
    Repository::new(pending, dim.unwrap_or(0), embedder.id())
}

pub fn retrieve_top_k<'r>(
    repo: &'r Repository,
    query_text: &str,
    k: usize,
    exclusion: Option<&Exclusion>,
    embedder: &dyn Embedder,
) -> Result<Vec<RetrievalResult<'r>>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if repo.is_empty() {
        return Err(RetrievalError::NoEligibleEntries);
    }
    let mut vectors = embedder
        .embed(&[query_text.to_string()])
        .map_err(RetrievalError::QueryEmbedding)?;
    let query = vectors.pop().ok_or(RetrievalError::CountMismatch { expected: 1, found: 0 })?;
    repo.top_k(&query, k, exclusion)
}

#[derive(Serialize, Deserialize)]
struct RepoMeta {
    embedder_id: String,
    embed_dim: usize,
    entries: usize,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

/// Writes one JSON entry per line, plus a `<path>.meta.json` sidecar naming
/// the embedder. f32 components are written in shortest round-trip form
/// (at most 9 significant digits), so reloading is bit-exact.
pub fn save_repository(repo: &Repository, path: &Path) -> Result<(), RetrievalError> {
    let io = |p: &Path, source| RetrievalError::Io {
        path: p.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(|e| io(path, e))?);
    for e in &repo.entries {
        serde_json::to_writer(&mut out, e).map_err(|e| io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| io(path, e))?;
    }
    out.flush().map_err(|e| io(path, e))?;
    let meta = RepoMeta {
        embedder_id: repo.embedder_id.clone(),
        embed_dim: repo.embed_dim,
        entries: repo.len(),
    };
    let mp = meta_path(path);
    std::fs::write(&mp, serde_json::to_vec_pretty(&meta).expect("meta serializes")).map_err(|e| io(&mp, e))
}

pub fn load_repository(path: &Path) -> Result<Repository, RetrievalError> {
    let io = |p: &Path, source| RetrievalError::Io {
        path: p.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(|e| io(path, e))?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: RepoEntry = serde_json::from_str(&line).map_err(|e| RetrievalError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    let mp = meta_path(path);
    let (embedder_id, dim) = match std::fs::read(&mp) {
        Ok(raw) => {
            let meta: RepoMeta = serde_json::from_slice(&raw).map_err(|e| RetrievalError::Malformed {
                path: mp.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?;
            (meta.embedder_id, meta.embed_dim)
        }
        Err(_) => ("unknown".to_string(), 0),
    };
    if dim != 0 {
        if let Some((at, e)) = entries.iter().enumerate().find(|(_, e)| e.vector.len() != dim) {
            return Err(RetrievalError::DimensionMismatch {
                at,
                expected: dim,
                found: e.vector.len(),
            });
        }
    }
    Repository::new(entries, dim, embedder_id)
}
