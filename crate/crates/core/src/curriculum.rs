//! Conversation difficulty from weighted emotional shifts, difficulty
//! buckets, and the easy-to-hard epoch schedule.
//!
//! Difficulty of a conversation is
//!
//! ```text
//! DIF = (WES_same + WES_diff + N_sp) / (N_u + N_sp)
//! ```
//!
//! where `WES_same` sums shift weights over consecutive turns of each
//! speaker, `WES_diff` over adjacent turns by different speakers, `N_sp` is
//! the speaker count and `N_u` the utterance count.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, Corpus};
use crate::emotion::{EmotionWheel, GeometryError, WesParams};

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("conversation {id:?}: utterance {index} has no label")]
    Unlabeled { id: String, index: usize },
    #[error("conversation {id:?}: {source}")]
    Geometry {
        id: String,
        #[source]
        source: GeometryError,
    },
    #[error("bucket count {n} out of range for {conversations} conversations")]
    BucketCount { n: usize, conversations: usize },
    #[error("epoch count {t} is smaller than bucket count {n}")]
    TooFewEpochs { t: usize, n: usize },
    #[error("duplicate conversation id {0:?} in difficulty reports")]
    DuplicateConversation(String),
    #[error("schedule has no epochs")]
    EmptySchedule,
    #[error("unknown cross-speaker mode {0:?} (expected shift_required or always)")]
    UnknownMode(String),
    #[error("io error writing manifest {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which adjacent cross-speaker pairs contribute to `WES_diff`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffSpeakerMode {
    /// Only pairs whose emotions differ.
    #[default]
    ShiftRequired,
    /// Every adjacent pair with different speakers.
    Always,
}

impl FromStr for DiffSpeakerMode {
    type Err = CurriculumError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shift_required" => Ok(DiffSpeakerMode::ShiftRequired),
            "always" => Ok(DiffSpeakerMode::Always),
            other => Err(CurriculumError::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for DiffSpeakerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiffSpeakerMode::ShiftRequired => "shift_required",
            DiffSpeakerMode::Always => "always",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub conversation_id: String,
    pub wes_same: f64,
    pub wes_diff: f64,
    pub n_sp: usize,
    pub n_u: usize,
    pub n_shift_same: usize,
    pub n_shift_diff: usize,
    pub dif: f64,
}

pub fn conversation_difficulty(
    conv: &Conversation,
    wheel: &EmotionWheel,
    params: &WesParams,
    mode: DiffSpeakerMode,
) -> Result<DifficultyReport, CurriculumError> {
    let geometry = |source| CurriculumError::Geometry {
        id: conv.id.clone(),
        source,
    };
    let mut labels = Vec::with_capacity(conv.len());
    for u in &conv.utterances {
        let label = u.label.as_deref().ok_or_else(|| CurriculumError::Unlabeled {
            id: conv.id.clone(),
            index: u.index,
        })?;
        if !wheel.contains(label) {
            return Err(geometry(GeometryError::UnknownLabel(label.to_string())));
        }
        labels.push(label);
    }
    let weight = |a: &str, b: &str| -> Result<f64, CurriculumError> {
        let s = wheel.similarity(a, b).map_err(geometry)?;
        params.wes(s).map_err(geometry)
    };

    // Per-speaker emotion sequences, speakers in first-appearance order.
    let mut sequences: Vec<(&str, Vec<&str>)> = Vec::new();
    for (u, label) in conv.utterances.iter().zip(&labels) {
        match sequences.iter_mut().find(|(s, _)| *s == u.speaker) {
            Some((_, seq)) => seq.push(label),
            None => sequences.push((&u.speaker, vec![label])),
        }
    }

    let mut wes_same = 0.0;
    let mut n_shift_same = 0;
    for (_, seq) in &sequences {
        for pair in seq.windows(2) {
            if pair[0] != pair[1] {
                wes_same += weight(pair[0], pair[1])?;
                n_shift_same += 1;
            }
        }
    }

    let mut wes_diff = 0.0;
    let mut n_shift_diff = 0;
    for (pair, lab) in conv.utterances.windows(2).zip(labels.windows(2)) {
        if pair[0].speaker == pair[1].speaker {
            continue;
        }
        if mode == DiffSpeakerMode::ShiftRequired && lab[0] == lab[1] {
            continue;
        }
        wes_diff += weight(lab[0], lab[1])?;
        n_shift_diff += 1;
    }

    let n_sp = sequences.len();
    let n_u = conv.len();
    let dif = (wes_same + wes_diff + n_sp as f64) / (n_u + n_sp) as f64;
    Ok(DifficultyReport {
        conversation_id: conv.id.clone(),
        wes_same,
        wes_diff,
        n_sp,
        n_u,
        n_shift_same,
        n_shift_diff,
        dif,
    })
}

/// Difficulty of every labeled conversation in `corpus`. Conversations with
/// no labels at all are skipped; partially labeled ones are an error.
pub fn corpus_difficulty(
    corpus: &Corpus,
    wheel: &EmotionWheel,
    params: &WesParams,
    mode: DiffSpeakerMode,
) -> Result<Vec<DifficultyReport>, CurriculumError> {
    corpus
        .conversations
        .par_iter()
        .filter(|c| !c.is_unlabeled())
        .map(|c| conversation_difficulty(c, wheel, params, mode))
        .collect()
}

/// Difficulty buckets and, once scheduled, the per-epoch training sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    /// `D_1..D_n`, easiest first; ids within a bucket in sorted order.
    pub buckets: Vec<Vec<String>>,
    pub difficulty: BTreeMap<String, f64>,
    /// Empty until [`CurriculumPlan::schedule`] is called.
    pub per_epoch: Vec<Vec<String>>,
}

impl CurriculumPlan {
    pub fn n(&self) -> usize {
        self.buckets.len()
    }

    pub fn t(&self) -> usize {
        self.per_epoch.len()
    }

    pub fn schedule(mut self, t: usize) -> Result<Self, CurriculumError> {
        self.per_epoch = epoch_schedule(&self, t)?;
        Ok(self)
    }

    /// Conversations in bucket order.
    pub fn all_conversations(&self) -> impl Iterator<Item = &String> {
        self.buckets.iter().flatten()
    }
}

/// Sorts by `(dif, id)` ascending and cuts the order into `n` contiguous
/// buckets whose sizes differ by at most one, earlier buckets larger.
pub fn partition_buckets(reports: &[DifficultyReport], n: usize) -> Result<CurriculumPlan, CurriculumError> {
    if n == 0 || n > reports.len() {
        return Err(CurriculumError::BucketCount {
            n,
            conversations: reports.len(),
        });
    }
    let mut seen = HashSet::new();
    for r in reports {
        if !seen.insert(r.conversation_id.as_str()) {
            return Err(CurriculumError::DuplicateConversation(r.conversation_id.clone()));
        }
    }
    let mut sorted: Vec<&DifficultyReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        a.dif
            .total_cmp(&b.dif)
            .then_with(|| a.conversation_id.cmp(&b.conversation_id))
    });

    let base = sorted.len() / n;
    let extra = sorted.len() % n;
    let mut buckets = Vec::with_capacity(n);
    let mut rest = sorted.as_slice();
    for i in 0..n {
        let size = base + usize::from(i < extra);
        let (head, tail) = rest.split_at(size);
        buckets.push(head.iter().map(|r| r.conversation_id.clone()).collect());
        rest = tail;
    }
    Ok(CurriculumPlan {
        buckets,
        difficulty: reports.iter().map(|r| (r.conversation_id.clone(), r.dif)).collect(),
        per_epoch: Vec::new(),
    })
}

/// Epoch `e` (1-based) trains on `D_1 ∪ … ∪ D_min(e, n)`; once every bucket
/// has been added the remaining epochs use the full set.
pub fn epoch_schedule(plan: &CurriculumPlan, t: usize) -> Result<Vec<Vec<String>>, CurriculumError> {
    let n = plan.n();
    if t < n {
        return Err(CurriculumError::TooFewEpochs { t, n });
    }
    let mut train: Vec<String> = Vec::new();
    let mut epochs = Vec::with_capacity(t);
    for epoch in 1..=t {
        if epoch <= n {
            train.extend(plan.buckets[epoch - 1].iter().cloned());
        }
        epochs.push(train.clone());
    }
    Ok(epochs)
}

#[derive(Serialize)]
struct ManifestRecord<'a> {
    epoch: usize,
    conversations: &'a [String],
    dif: BTreeMap<&'a str, f64>,
}

pub fn write_manifest<W: Write>(plan: &CurriculumPlan, out: &mut W) -> Result<(), CurriculumError> {
    if plan.per_epoch.is_empty() {
        return Err(CurriculumError::EmptySchedule);
    }
    let io = |source| CurriculumError::Io {
        path: "<writer>".into(),
        source,
    };
    for (i, ids) in plan.per_epoch.iter().enumerate() {
        let record = ManifestRecord {
            epoch: i + 1,
            conversations: ids,
            dif: ids
                .iter()
                .map(|id| (id.as_str(), plan.difficulty.get(id).copied().unwrap_or(f64::NAN)))
                .collect(),
        };
        serde_json::to_writer(&mut *out, &record).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    Ok(())
}

/// Writes one JSONL record per epoch. Refuses to create a file for an empty
/// schedule.
pub fn emit_manifest(plan: &CurriculumPlan, path: &Path) -> Result<(), CurriculumError> {
    if plan.per_epoch.is_empty() {
        return Err(CurriculumError::EmptySchedule);
    }
    let io = |source| CurriculumError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    write_manifest(plan, &mut buf)?;
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    out.write_all(&buf).map_err(io)?;
    out.flush().map_err(io)
}

/// Map from conversation id to its bucket index (0-based).
pub fn bucket_of(plan: &CurriculumPlan) -> HashMap<&str, usize> {
    plan.buckets
        .iter()
        .enumerate()
        .flat_map(|(i, b)| b.iter().map(move |id| (id.as_str(), i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    fn toy_wheel() -> EmotionWheel {
        EmotionWheel::new([("happy", 0.0), ("angry", 90.0), ("sad", 180.0)]).unwrap()
    }

    fn conv(id: &str, turns: &[(&str, &str)]) -> Conversation {
        let utts = turns
            .iter()
            .enumerate()
            .map(|(i, (s, l))| Utterance::new(i, *s, format!("utterance {i}"), Some(l)))
            .collect();
        Conversation::new(id, utts).unwrap()
    }

    fn report(id: &str, dif: f64) -> DifficultyReport {
        DifficultyReport {
            conversation_id: id.into(),
            wes_same: 0.0,
            wes_diff: 0.0,
            n_sp: 1,
            n_u: 1,
            n_shift_same: 0,
            n_shift_diff: 0,
            dif,
        }
    }

    #[test]
    fn zero_shift_conversation() {
        let c = conv("c", &[("A", "sad"), ("A", "sad"), ("A", "sad"), ("A", "sad")]);
        let r = conversation_difficulty(&c, &toy_wheel(), &WesParams::default(), DiffSpeakerMode::ShiftRequired).unwrap();
        assert_eq!(r.wes_same, 0.0);
        assert_eq!(r.wes_diff, 0.0);
        assert!((r.dif - 0.2).abs() < 1e-12);
    }

    #[test]
    fn hand_traced_fixture() {
        let c = conv("c", &[("A", "happy"), ("B", "sad"), ("A", "angry"), ("B", "sad")]);
        let r = conversation_difficulty(&c, &toy_wheel(), &WesParams::new(1.0, 1.0).unwrap(), DiffSpeakerMode::ShiftRequired).unwrap();
        assert!((r.wes_same - 4.0 / 3.0).abs() < 1e-12);
        assert!((r.wes_diff - 11.0 / 3.0).abs() < 1e-12);
        assert!((r.dif - 7.0 / 6.0).abs() < 1e-12);
        assert_eq!((r.n_shift_same, r.n_shift_diff, r.n_sp, r.n_u), (1, 3, 2, 4));

        let r = conversation_difficulty(&c, &toy_wheel(), &WesParams::new(0.0, 1.0).unwrap(), DiffSpeakerMode::ShiftRequired).unwrap();
        assert!((r.wes_same - 1.0).abs() < 1e-12);
        assert!((r.wes_diff - 3.0).abs() < 1e-12);
        assert!((r.dif - 1.0).abs() < 1e-12);
    }

    #[test]
    fn always_mode_counts_non_shifts() {
        let c = conv("c", &[("A", "sad"), ("B", "sad")]);
        let p = WesParams::default();
        let req = conversation_difficulty(&c, &toy_wheel(), &p, DiffSpeakerMode::ShiftRequired).unwrap();
        let all = conversation_difficulty(&c, &toy_wheel(), &p, DiffSpeakerMode::Always).unwrap();
        assert_eq!(req.n_shift_diff, 0);
        assert_eq!(all.n_shift_diff, 1);
        assert_eq!(all.wes_diff, 2.0);
    }

    #[test]
    fn difficulty_errors() {
        let utts = vec![Utterance::new(0, "A", "x", Some("happy")), Utterance::new(1, "B", "y", None)];
        let c = Conversation::new("c", utts).unwrap();
        assert!(matches!(
            conversation_difficulty(&c, &toy_wheel(), &WesParams::default(), DiffSpeakerMode::ShiftRequired),
            Err(CurriculumError::Unlabeled { index: 1, .. })
        ));
        let c = conv("c", &[("A", "happy"), ("B", "bored")]);
        assert!(matches!(
            conversation_difficulty(&c, &toy_wheel(), &WesParams::default(), DiffSpeakerMode::ShiftRequired),
            Err(CurriculumError::Geometry { .. })
        ));
    }

    #[test]
    fn buckets_split_sorted_order() {
        let reports = vec![report("d", 1.1), report("a", 0.2), report("c", 0.9), report("b", 0.5)];
        let plan = partition_buckets(&reports, 2).unwrap();
        assert_eq!(plan.buckets, vec![vec!["a", "b"], vec!["c", "d"]]);
        let single = partition_buckets(&reports, 1).unwrap();
        assert_eq!(single.buckets, vec![vec!["a", "b", "c", "d"]]);
        assert!(partition_buckets(&reports, 0).is_err());
        assert!(partition_buckets(&reports, 5).is_err());
    }

    #[test]
    fn ties_break_by_id_and_uneven_sizes() {
        let reports: Vec<_> = ["e", "c", "a", "d", "b"].iter().map(|id| report(id, 0.5)).collect();
        let plan = partition_buckets(&reports, 2).unwrap();
        assert_eq!(plan.buckets, vec![vec!["a", "b", "c"], vec!["d", "e"]]);
    }

    #[test]
    fn schedules() {
        let reports = vec![report("a", 0.1), report("b", 0.2), report("c", 0.3), report("d", 0.4)];
        let plan = partition_buckets(&reports, 2).unwrap();
        let epochs = epoch_schedule(&plan, 4).unwrap();
        assert_eq!(epochs, vec![vec!["a", "b"], vec!["a", "b", "c", "d"], vec!["a", "b", "c", "d"], vec!["a", "b", "c", "d"]]);

        let one = partition_buckets(&reports, 1).unwrap();
        assert!(epoch_schedule(&one, 3).unwrap().iter().all(|e| e.len() == 4));

        let three = partition_buckets(&reports[..3], 3).unwrap();
        assert_eq!(epoch_schedule(&three, 3).unwrap(), vec![vec!["a"], vec!["a", "b"], vec!["a", "b", "c"]]);
        assert!(matches!(epoch_schedule(&three, 2), Err(CurriculumError::TooFewEpochs { t: 2, n: 3 })));
    }

    #[test]
    fn manifest_is_deterministic_and_refuses_empty() {
        let reports = vec![report("a", 0.1), report("b", 0.2), report("c", 0.3), report("d", 0.4)];
        let plan = partition_buckets(&reports, 2).unwrap();
        assert!(matches!(write_manifest(&plan, &mut Vec::new()), Err(CurriculumError::EmptySchedule)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        assert!(emit_manifest(&plan, &path).is_err());
        assert!(!path.exists());

        let plan = plan.schedule(4).unwrap();
        emit_manifest(&plan, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        emit_manifest(&plan, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        let text = String::from_utf8(first).unwrap();
        let counts: Vec<usize> = text
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["conversations"].as_array().unwrap().len())
            .collect();
        assert_eq!(counts, vec![2, 4, 4, 4]);
        assert!(text.starts_with(r#"{"epoch":1,"conversations":["a","b"],"dif":{"a":0.1,"b":0.2}}"#));
    }
}
