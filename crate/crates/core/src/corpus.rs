//! Dialogue data model and the normalized JSONL conversation format.
//!
//! Every source dataset is converted into one schema: one conversation per
//! line, utterances carrying a 0-based contiguous `index`, a speaker id, the
//! text and an optional emotion label. Labels are lowercased and trimmed at
//! ingestion so datasets that disagree on casing compare equal.

pub mod convert;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: unknown label {label:?} (not in expected label set)")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate conversation id {id:?}")]
    DuplicateConversation { line: usize, id: String },
    #[error("conversation {id:?}: utterance indices are not contiguous from 0 (expected {expected}, found {found})")]
    NonContiguous {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("conversation {id:?}: utterance {index} has empty text")]
    EmptyText { id: String, index: usize },
    #[error("conversation {id:?} has no utterances")]
    EmptyConversation { id: String },
    #[error("line {line}: dataset {found:?} differs from {expected:?} declared earlier in the file")]
    MixedDataset {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("label set contains duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("conversation {id:?}: label {label:?} is not in the corpus label set")]
    LabelOutsideSet { id: String, label: String },
    #[error("conversation {id:?}: target index {index} out of range (len {len})")]
    IndexOutOfRange { id: String, index: usize, len: usize },
    #[error("history window must be at least 1")]
    ZeroWindow,
    #[error("unknown split {0:?} (expected train, val, test or none)")]
    UnknownSplit(String),
    #[error("conversion error: {0}")]
    Convert(String),
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Lowercase and trim a label, the canonical form used everywhere.
pub fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    pub label: Option<String>,
}

impl Utterance {
    pub fn new(index: usize, speaker: impl Into<String>, text: impl Into<String>, label: Option<&str>) -> Self {
        Utterance {
            index,
            speaker: speaker.into(),
            text: text.into(),
            label: label.map(normalize_label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
    /// Free-form scenario tag carried by generated dialogues.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl Conversation {
    /// Builds a conversation, checking the index and text invariants.
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>) -> Result<Self, CorpusError> {
        let conv = Conversation {
            id: id.into(),
            utterances,
            domain: None,
        };
        conv.validate()?;
        Ok(conv)
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.domain = Some(domain.into());
        self
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.utterances.is_empty() {
            return Err(CorpusError::EmptyConversation { id: self.id.clone() });
        }
        for (expected, u) in self.utterances.iter().enumerate() {
            if u.index != expected {
                return Err(CorpusError::NonContiguous {
                    id: self.id.clone(),
                    expected,
                    found: u.index,
                });
            }
            if u.text.trim().is_empty() {
                return Err(CorpusError::EmptyText {
                    id: self.id.clone(),
                    index: u.index,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Distinct speakers in order of first appearance.
    pub fn speakers(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.utterances
            .iter()
            .filter(|u| seen.insert(u.speaker.as_str()))
            .map(|u| u.speaker.as_str())
            .collect()
    }

    pub fn speaker_set(&self) -> BTreeSet<&str> {
        self.utterances.iter().map(|u| u.speaker.as_str()).collect()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.utterances.iter().all(|u| u.label.is_some())
    }

    pub fn is_unlabeled(&self) -> bool {
        self.utterances.iter().all(|u| u.label.is_none())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    None,
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "dev" | "valid" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "none" | "" => Ok(Split::None),
            other => Err(CorpusError::UnknownSplit(other.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => "none",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub split: Split,
    pub label_set: Vec<String>,
    pub conversations: Vec<Conversation>,
}

impl Corpus {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        label_set: Vec<String>,
        conversations: Vec<Conversation>,
    ) -> Result<Self, CorpusError> {
        let corpus = Corpus {
            name: name.into(),
            split,
            label_set: label_set.iter().map(|l| normalize_label(l)).collect(),
            conversations,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        validate_label_set(&self.label_set)?;
        let labels: HashSet<&str> = self.label_set.iter().map(String::as_str).collect();
        let mut ids = HashSet::new();
        for (i, conv) in self.conversations.iter().enumerate() {
            conv.validate()?;
            if !ids.insert(conv.id.as_str()) {
                return Err(CorpusError::DuplicateConversation {
                    line: i + 1,
                    id: conv.id.clone(),
                });
            }
            for u in &conv.utterances {
                if let Some(label) = &u.label {
                    if !labels.contains(label.as_str()) {
                        return Err(CorpusError::LabelOutsideSet {
                            id: conv.id.clone(),
                            label: label.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn num_utterances(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    pub fn conversation(&self, id: &str) -> Option<&Conversation> {
        self.conversations.iter().find(|c| c.id == id)
    }
}

fn validate_label_set(labels: &[String]) -> Result<(), CorpusError> {
    if labels.is_empty() {
        return Err(CorpusError::EmptyLabelSet);
    }
    let mut seen = HashSet::new();
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(CorpusError::DuplicateLabel(l.clone()));
        }
    }
    Ok(())
}

/// A label-set manifest file: `{"name": ..., "labels": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub name: String,
    pub labels: Vec<String>,
}

impl LabelSet {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        let mut set: LabelSet = serde_json::from_reader(BufReader::new(file)).map_err(|e| CorpusError::Malformed {
            line: e.line(),
            message: e.to_string(),
        })?;
        set.labels = set.labels.iter().map(|l| normalize_label(l)).collect();
        validate_label_set(&set.labels)?;
        Ok(set)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ConversationRecord {
    dialogue_id: String,
    dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
    utterances: Vec<UtteranceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    index: usize,
    speaker: String,
    text: String,
    #[serde(default)]
    label: Option<String>,
}

/// Loads a corpus JSONL file. The corpus name comes from the `dataset` field
/// (or the file stem for an empty file).
pub fn load_corpus(path: &Path, expected_labels: Option<&[String]>) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let fallback = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    read_corpus(BufReader::new(file), &fallback, expected_labels)
}

pub fn read_corpus<R: BufRead>(
    reader: R,
    fallback_name: &str,
    expected_labels: Option<&[String]>,
) -> Result<Corpus, CorpusError> {
    let expected: Option<Vec<String>> = expected_labels.map(|ls| ls.iter().map(|l| normalize_label(l)).collect());
    let mut name: Option<String> = None;
    let mut seen_labels: Vec<String> = Vec::new();
    let mut ids = HashSet::new();
    let mut conversations = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ConversationRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        match &name {
            None => name = Some(record.dataset.clone()),
            Some(n) if *n != record.dataset => {
                return Err(CorpusError::MixedDataset {
                    line: line_no,
                    expected: n.clone(),
                    found: record.dataset,
                })
            }
            Some(_) => {}
        }
        if !ids.insert(record.dialogue_id.clone()) {
            return Err(CorpusError::DuplicateConversation {
                line: line_no,
                id: record.dialogue_id,
            });
        }
        let mut utterances = Vec::with_capacity(record.utterances.len());
        for u in record.utterances {
            let label = u.label.as_deref().map(normalize_label);
            if let Some(l) = &label {
                match &expected {
                    Some(exp) if !exp.contains(l) => {
                        return Err(CorpusError::UnknownLabel {
                            line: line_no,
                            label: l.clone(),
                        })
                    }
                    Some(_) => {}
                    None if !seen_labels.contains(l) => seen_labels.push(l.clone()),
                    None => {}
                }
            }
            utterances.push(Utterance {
                index: u.index,
                speaker: u.speaker,
                text: u.text,
                label,
            });
        }
        let conv = Conversation {
            id: record.dialogue_id,
            utterances,
            domain: record.domain,
        };
        conv.validate()?;
        conversations.push(conv);
    }

    let label_set = match expected {
        Some(exp) => exp,
        None => seen_labels,
    };
    let corpus = Corpus {
        name: name.unwrap_or_else(|| fallback_name.to_string()),
        split: Split::None,
        label_set,
        conversations,
    };
    // An unlabeled corpus without a manifest has no label set to validate.
    if !corpus.label_set.is_empty() {
        validate_label_set(&corpus.label_set)?;
    }
    Ok(corpus)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_corpus(corpus, &mut out).map_err(|e| CorpusError::io(path, e))?;
    out.flush().map_err(|e| CorpusError::io(path, e))
}

pub fn write_corpus<W: Write>(corpus: &Corpus, out: &mut W) -> std::io::Result<()> {
    for conv in &corpus.conversations {
        let record = ConversationRecord {
            dialogue_id: conv.id.clone(),
            dataset: corpus.name.clone(),
            domain: conv.domain.clone(),
            utterances: conv
                .utterances
                .iter()
                .map(|u| UtteranceRecord {
                    index: u.index,
                    speaker: u.speaker.clone(),
                    text: u.text.clone(),
                    label: u.label.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// The last `min(w, target_index + 1)` utterances ending at the target.
pub fn history_window(conv: &Conversation, target_index: usize, w: usize) -> Result<&[Utterance], CorpusError> {
    if w == 0 {
        return Err(CorpusError::ZeroWindow);
    }
    if target_index >= conv.len() {
        return Err(CorpusError::IndexOutOfRange {
            id: conv.id.clone(),
            index: target_index,
            len: conv.len(),
        });
    }
    let start = (target_index + 1).saturating_sub(w);
    Ok(&conv.utterances[start..=target_index])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    /// Per-label counts in label-set order.
    pub label_counts: Vec<(String, usize)>,
    pub unlabeled: usize,
    pub utterances: usize,
    pub conversations: usize,
    /// Utterance counts per conversation domain, when domains are present.
    pub domain_counts: BTreeMap<String, usize>,
}

impl CorpusStats {
    pub fn count(&self, label: &str) -> usize {
        self.label_counts
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, c)| *c)
            .unwrap_or(0)
    }
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut counts: BTreeMap<&str, usize> = corpus.label_set.iter().map(|l| (l.as_str(), 0)).collect();
    let mut domain_counts = BTreeMap::new();
    let mut unlabeled = 0;
    for conv in &corpus.conversations {
        if let Some(d) = &conv.domain {
            *domain_counts.entry(d.clone()).or_insert(0) += conv.len();
        }
        for u in &conv.utterances {
            match &u.label {
                Some(l) => *counts.entry(l.as_str()).or_insert(0) += 1,
                None => unlabeled += 1,
            }
        }
    }
    CorpusStats {
        label_counts: corpus
            .label_set
            .iter()
            .map(|l| (l.clone(), counts[l.as_str()]))
            .collect(),
        unlabeled,
        utterances: corpus.num_utterances(),
        conversations: corpus.conversations.len(),
        domain_counts,
    }
}
