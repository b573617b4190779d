use std::collections::{BTreeMap, HashMap};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::BasicEmotion;
use crate::corpus::Conversation;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnnotationError {
    #[error("unknown sample {0:?}")]
    UnknownSample(String),
    #[error("annotator id is empty")]
    EmptyAnnotator,
    #[error("label {0:?} is not one of the five categories")]
    LabelOutsideSet(String),
    #[error("sample {sample_id:?} already has two annotators")]
    ThirdAnnotator { sample_id: String },
    #[error("sample {sample_id:?} is already resolved")]
    AlreadyResolved { sample_id: String },
    #[error("conversation {0:?} is not fully labeled with the five categories")]
    NotEnqueueable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Pending,
    Accepted,
    Rejected,
}

/// Server-side record. Never sent to annotators as is; see [`QueueItem`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSample {
    pub sample_id: String,
    pub dialogue_id: String,
    pub index: usize,
    pub text: String,
    pub domain: Option<String>,
    pub round: u32,
    pub original_label: BasicEmotion,
    pub verdicts: BTreeMap<String, BasicEmotion>,
    pub status: SampleStatus,
}

impl AnnotationSample {
    fn resolve(&mut self) {
        if self.verdicts.len() == 2 {
            self.status = if self.verdicts.values().all(|v| *v == self.original_label) {
                SampleStatus::Accepted
            } else {
                SampleStatus::Rejected
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLine {
    pub index: usize,
    pub speaker: String,
    pub text: String,
    pub target: bool,
}

/// What an annotator sees: the utterance in its full dialogue, and the
/// label choices. Carries no label information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueItem {
    pub sample_id: String,
    pub dialogue_id: String,
    pub index: usize,
    pub text: String,
    pub domain: Option<String>,
    pub context: Vec<ContextLine>,
    pub choices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictAck {
    pub sample_id: String,
    pub annotator: String,
    pub label: BasicEmotion,
    pub status: SampleStatus,
    pub verdict_count: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub pending: usize,
    pub accepted: usize,
    pub rejected: usize,
}

impl Tally {
    fn add(&mut self, status: SampleStatus) {
        match status {
            SampleStatus::Pending => self.pending += 1,
            SampleStatus::Accepted => self.accepted += 1,
            SampleStatus::Rejected => self.rejected += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: Tally,
    pub by_emotion: BTreeMap<BasicEmotion, Tally>,
    pub by_domain: BTreeMap<String, Tally>,
    /// Verdicts submitted per annotator.
    pub per_annotator: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementView {
    pub round: u32,
    pub max_rounds: u32,
    pub round_open: bool,
    pub by_emotion: BTreeMap<BasicEmotion, Tally>,
    pub by_domain: BTreeMap<String, Tally>,
    pub targets: BTreeMap<BasicEmotion, usize>,
    pub deficit: BTreeMap<BasicEmotion, usize>,
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub(super) struct StoreData {
    pub samples: Vec<AnnotationSample>,
    pub dialogues: Vec<Conversation>,
}

#[derive(Debug, Default)]
struct Inner {
    data: StoreData,
    by_id: HashMap<String, usize>,
    dialogue_pos: HashMap<String, usize>,
}

impl Inner {
    fn from_data(data: StoreData) -> Self {
        let by_id = data.samples.iter().enumerate().map(|(i, s)| (s.sample_id.clone(), i)).collect();
        let dialogue_pos = data.dialogues.iter().enumerate().map(|(i, d)| (d.id.clone(), i)).collect();
        Inner { data, by_id, dialogue_pos }
    }
}

/// Masked samples awaiting two independent verdicts. Every operation runs
/// under one lock, so a status is always resolved in the same step that
/// stores the second verdict.
#[derive(Debug, Default)]
pub struct AnnotationStore {
    inner: Mutex<Inner>,
}

pub fn sample_id(dialogue_id: &str, index: usize) -> String {
    format!("{dialogue_id}#{index}")
}

impl AnnotationStore {
    pub fn new() -> Self {
        AnnotationStore::default()
    }

    pub(super) fn from_data(data: StoreData) -> Self {
        AnnotationStore {
            inner: Mutex::new(Inner::from_data(data)),
        }
    }

    pub(super) fn data(&self) -> StoreData {
        self.lock().data.clone()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// One pending sample per utterance. Re-enqueueing a dialogue already
    /// present adds nothing. Returns the ids of newly created samples.
    pub fn mask_and_enqueue(&self, dialogues: &[Conversation], round: u32) -> Result<Vec<String>, AnnotationError> {
        let mut parsed = Vec::with_capacity(dialogues.len());
        for conv in dialogues {
            let labels = conv
                .utterances
                .iter()
                .map(|u| u.label.as_deref().and_then(|l| l.parse::<BasicEmotion>().ok()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| AnnotationError::NotEnqueueable(conv.id.clone()))?;
            parsed.push(labels);
        }
        let mut inner = self.lock();
        let mut created = Vec::new();
        for (conv, labels) in dialogues.iter().zip(parsed) {
            if !inner.dialogue_pos.contains_key(&conv.id) {
                let pos = inner.data.dialogues.len();
                inner.dialogue_pos.insert(conv.id.clone(), pos);
                inner.data.dialogues.push(conv.clone());
            }
            for (u, label) in conv.utterances.iter().zip(labels) {
                let id = sample_id(&conv.id, u.index);
                if inner.by_id.contains_key(&id) {
                    continue;
                }
                let pos = inner.data.samples.len();
                inner.by_id.insert(id.clone(), pos);
                inner.data.samples.push(AnnotationSample {
                    sample_id: id.clone(),
                    dialogue_id: conv.id.clone(),
                    index: u.index,
                    text: u.text.clone(),
                    domain: conv.domain.clone(),
                    round,
                    original_label: label,
                    verdicts: BTreeMap::new(),
                    status: SampleStatus::Pending,
                });
                created.push(id);
            }
        }
        Ok(created)
    }

    pub fn len(&self) -> usize {
        self.lock().data.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, id: &str) -> Option<AnnotationSample> {
        let inner = self.lock();
        inner.by_id.get(id).map(|&i| inner.data.samples[i].clone())
    }

    pub fn samples(&self) -> Vec<AnnotationSample> {
        self.lock().data.samples.clone()
    }

    pub fn dialogue(&self, id: &str) -> Option<Conversation> {
        let inner = self.lock();
        inner.dialogue_pos.get(id).map(|&i| inner.data.dialogues[i].clone())
    }

    /// Pending samples the annotator has not judged yet, in enqueue order.
    pub fn queue(&self, annotator: &str, limit: Option<usize>) -> Vec<QueueItem> {
        let inner = self.lock();
        let choices: Vec<String> = BasicEmotion::ALL.iter().map(|e| e.as_str().to_string()).collect();
        inner
            .data
            .samples
            .iter()
            .filter(|s| s.status == SampleStatus::Pending && !s.verdicts.contains_key(annotator))
            .take(limit.unwrap_or(usize::MAX))
            .map(|s| {
                let context = inner
                    .dialogue_pos
                    .get(&s.dialogue_id)
                    .map(|&d| {
                        inner.data.dialogues[d]
                            .utterances
                            .iter()
                            .map(|u| ContextLine {
                                index: u.index,
                                speaker: u.speaker.clone(),
                                text: u.text.clone(),
                                target: u.index == s.index,
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                QueueItem {
                    sample_id: s.sample_id.clone(),
                    dialogue_id: s.dialogue_id.clone(),
                    index: s.index,
                    text: s.text.clone(),
                    domain: s.domain.clone(),
                    context,
                    choices: choices.clone(),
                }
            })
            .collect()
    }

    /// Stores one annotator's verdict. While the sample is pending an
    /// annotator may change their verdict; once resolved, repeating the
    /// same verdict is a no-op and anything else is refused.
    pub fn record_verdict(&self, sample_id: &str, annotator: &str, label: &str) -> Result<VerdictAck, AnnotationError> {
        let annotator = annotator.trim();
        if annotator.is_empty() {
            return Err(AnnotationError::EmptyAnnotator);
        }
        let label: BasicEmotion = label
            .parse()
            .map_err(|_| AnnotationError::LabelOutsideSet(label.to_string()))?;
        let mut inner = self.lock();
        let pos = *inner
            .by_id
            .get(sample_id)
            .ok_or_else(|| AnnotationError::UnknownSample(sample_id.to_string()))?;
        let s = &mut inner.data.samples[pos];
        if s.status != SampleStatus::Pending {
            if s.verdicts.get(annotator) != Some(&label) {
                return Err(AnnotationError::AlreadyResolved {
                    sample_id: sample_id.to_string(),
                });
            }
        } else {
            if !s.verdicts.contains_key(annotator) && s.verdicts.len() >= 2 {
                return Err(AnnotationError::ThirdAnnotator {
                    sample_id: sample_id.to_string(),
                });
            }
            s.verdicts.insert(annotator.to_string(), label);
            s.resolve();
        }
        Ok(VerdictAck {
            sample_id: s.sample_id.clone(),
            annotator: annotator.to_string(),
            label,
            status: s.status,
            verdict_count: s.verdicts.len(),
        })
    }

    pub fn progress(&self) -> Progress {
        let inner = self.lock();
        let mut p = Progress {
            total: Tally::default(),
            by_emotion: BasicEmotion::ALL.iter().map(|e| (*e, Tally::default())).collect(),
            by_domain: BTreeMap::new(),
            per_annotator: BTreeMap::new(),
        };
        for s in &inner.data.samples {
            p.total.add(s.status);
            p.by_emotion.entry(s.original_label).or_default().add(s.status);
            p.by_domain.entry(s.domain.clone().unwrap_or_default()).or_default().add(s.status);
            for a in s.verdicts.keys() {
                *p.per_annotator.entry(a.clone()).or_default() += 1;
            }
        }
        p
    }

    pub fn pending_in_round(&self, round: u32) -> usize {
        self.lock()
            .data
            .samples
            .iter()
            .filter(|s| s.round == round && s.status == SampleStatus::Pending)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;

    fn dialogue(id: &str, labels: &[&str]) -> Conversation {
        let us = labels
            .iter()
            .enumerate()
            .map(|(i, l)| Utterance::new(i, if i % 2 == 0 { "A" } else { "B" }, format!("line {i} of {id}"), Some(l)))
            .collect();
        Conversation::new(id, us).unwrap().with_domain("healthcare")
    }

    fn store_with(label: &str) -> (AnnotationStore, String) {
        let s = AnnotationStore::new();
        let ids = s.mask_and_enqueue(&[dialogue("d", &[label])], 1).unwrap();
        (s, ids[0].clone())
    }

    #[test]
    fn four_verdict_cases() {
        let cases = [
            ("happiness", "happiness", SampleStatus::Accepted),
            ("happiness", "neutral", SampleStatus::Rejected),
            ("neutral", "happiness", SampleStatus::Rejected),
            ("neutral", "neutral", SampleStatus::Rejected),
        ];
        for (a, b, want) in cases {
            let (s, id) = store_with("happiness");
            assert_eq!(s.record_verdict(&id, "x", a).unwrap().status, SampleStatus::Pending);
            assert_eq!(s.record_verdict(&id, "y", b).unwrap().status, want, "{a}/{b}");
        }
    }

    #[test]
    fn enqueue_is_idempotent_and_counts() {
        let s = AnnotationStore::new();
        let ds: Vec<_> = (0..3).map(|i| dialogue(&format!("d{i}"), &["fear"; 5])).collect();
        assert_eq!(s.mask_and_enqueue(&ds, 1).unwrap().len(), 15);
        assert_eq!(s.mask_and_enqueue(&ds[..1], 1).unwrap().len(), 0);
        assert_eq!(s.len(), 15);
        assert_eq!(s.queue("anyone", None).len(), 15);
        assert_eq!(s.queue("anyone", Some(4)).len(), 4);
    }

    #[test]
    fn queue_payload_is_masked() {
        let s = AnnotationStore::new();
        s.mask_and_enqueue(&[dialogue("d", &["anger", "fear", "sadness"])], 1).unwrap();
        let items = s.queue("x", None);
        assert_eq!(items[1].context.len(), 3);
        assert!(items[1].context[1].target);
        let json = serde_json::to_string(&items).unwrap();
        assert!(!json.contains("original_label"));
        assert!(!json.contains("verdicts"));
        // Choices list every label, so no single label may appear anywhere else.
        for item in &items {
            let mut v = serde_json::to_value(item).unwrap();
            v.as_object_mut().unwrap().remove("choices");
            let t = v.to_string();
            assert!(!t.contains("anger") && !t.contains("fear") && !t.contains("sadness"));
        }
    }

    #[test]
    fn verdict_rules() {
        let (s, id) = store_with("fear");
        assert!(matches!(s.record_verdict("nope", "x", "fear"), Err(AnnotationError::UnknownSample(_))));
        assert!(matches!(s.record_verdict(&id, "x", "joy"), Err(AnnotationError::LabelOutsideSet(_))));
        assert!(matches!(s.record_verdict(&id, " ", "fear"), Err(AnnotationError::EmptyAnnotator)));
        s.record_verdict(&id, "x", "anger").unwrap();
        // Overwrite while pending.
        let ack = s.record_verdict(&id, "x", "fear").unwrap();
        assert_eq!(ack.verdict_count, 1);
        assert!(s.queue("x", None).is_empty());
        assert_eq!(s.queue("y", None).len(), 1);
        assert_eq!(s.record_verdict(&id, "y", "fear").unwrap().status, SampleStatus::Accepted);
        assert!(matches!(s.record_verdict(&id, "z", "fear"), Err(AnnotationError::AlreadyResolved { .. })));
        assert_eq!(s.record_verdict(&id, "y", "fear").unwrap().status, SampleStatus::Accepted);
        assert!(matches!(s.record_verdict(&id, "y", "anger"), Err(AnnotationError::AlreadyResolved { .. })));
        let p = s.progress();
        assert_eq!(p.total.accepted, 1);
        assert_eq!(p.by_emotion[&BasicEmotion::Fear].accepted, 1);
        assert_eq!(p.by_domain["healthcare"].accepted, 1);
        assert_eq!(p.per_annotator["x"], 1);
    }

    #[test]
    fn concurrent_annotators_resolve_once() {
        let s = AnnotationStore::new();
        let ds: Vec<_> = (0..10).map(|i| dialogue(&format!("d{i}"), &["sadness", "anger"])).collect();
        s.mask_and_enqueue(&ds, 1).unwrap();
        std::thread::scope(|scope| {
            for a in ["a1", "a2", "a3"] {
                let s = &s;
                scope.spawn(move || {
                    for item in s.queue(a, None) {
                        let _ = s.record_verdict(&item.sample_id, a, "sadness");
                    }
                });
            }
        });
        for sample in s.samples() {
            assert!(sample.verdicts.len() <= 2);
            let expected = match (sample.verdicts.len(), sample.original_label) {
                (2, BasicEmotion::Sadness) => SampleStatus::Accepted,
                (2, _) => SampleStatus::Rejected,
                _ => SampleStatus::Pending,
            };
            assert_eq!(sample.status, expected);
        }
    }
}
