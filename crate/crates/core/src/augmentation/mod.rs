//! Synthetic dialogue generation for under-represented emotions, label
//! masking with two-annotator verification, and the round loop that ties
//! them together.

mod annotation;
mod rounds;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatClient, ChatRequest, ClientError};
use crate::corpus::{normalize_label, Conversation, Corpus, CorpusError, Utterance};
use crate::prompting::{fill, templates};

pub use annotation::{
    AgreementView, AnnotationError, AnnotationSample, AnnotationStore, ContextLine, Progress, QueueItem, SampleStatus,
    Tally, VerdictAck,
};
pub use rounds::{AugmentationController, AugmentationRound, ControllerState, GenerationConfig};

pub const SUBTOPIC_COUNT: usize = 30;
pub const MAX_ROUNDS: u32 = 3;
pub const AUGMENTED_DATASET: &str = "augmented";

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("scenario domain is empty")]
    EmptyDomain,
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("scenario needs at least one target emotion")]
    NoTargets,
    #[error("unknown emotion {0:?}")]
    UnknownEmotion(String),
    #[error("only {got} unique subtopics after {attempts} requests")]
    SubtopicShortfall { got: usize, attempts: u32 },
    #[error("dialogue line {line} is not `speaker | emotion | text`: {content:?}")]
    DialogueParse { line: usize, content: String },
    #[error("dialogue line {line}: label {label:?} is not one of the five categories")]
    LabelOutsideSet { line: usize, label: String },
    #[error("dialogue has {0} speakers, expected exactly 2")]
    SpeakerCount(usize),
    #[error("dialogue has {0} utterances, need at least 2")]
    TooShort(usize),
    #[error("no round is open")]
    NoOpenRound,
    #[error("round {0} is still open")]
    RoundOpen(u32),
    #[error("{0} samples of the open round are still pending")]
    PendingSamples(usize),
    #[error("augmented corpus: {0}")]
    Invalid(String),
    #[error("model call failed: {0}")]
    Chat(#[from] ClientError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
}

impl AugmentError {
    pub fn is_upstream(&self) -> bool {
        matches!(self, AugmentError::Chat(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Healthcare,
    Workplace,
    Education,
    Family,
    Social,
    Entertainment,
    Comprehensive,
}

impl Domain {
    pub const ALL: [Domain; 7] = [
        Domain::Healthcare,
        Domain::Workplace,
        Domain::Education,
        Domain::Family,
        Domain::Social,
        Domain::Entertainment,
        Domain::Comprehensive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Healthcare => "healthcare",
            Domain::Workplace => "workplace",
            Domain::Education => "education",
            Domain::Family => "family",
            Domain::Social => "social",
            Domain::Entertainment => "entertainment",
            Domain::Comprehensive => "comprehensive",
        }
    }
}

impl FromStr for Domain {
    type Err = AugmentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = normalize_label(s);
        if s.is_empty() {
            return Err(AugmentError::EmptyDomain);
        }
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or(AugmentError::UnknownDomain(s))
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The closed label set of generated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasicEmotion {
    Happiness,
    Neutral,
    Fear,
    Sadness,
    Anger,
}

impl BasicEmotion {
    pub const ALL: [BasicEmotion; 5] = [
        BasicEmotion::Happiness,
        BasicEmotion::Neutral,
        BasicEmotion::Fear,
        BasicEmotion::Sadness,
        BasicEmotion::Anger,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BasicEmotion::Happiness => "happiness",
            BasicEmotion::Neutral => "neutral",
            BasicEmotion::Fear => "fear",
            BasicEmotion::Sadness => "sadness",
            BasicEmotion::Anger => "anger",
        }
    }
}

impl FromStr for BasicEmotion {
    type Err = AugmentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = normalize_label(s);
        BasicEmotion::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or(AugmentError::UnknownEmotion(s))
    }
}

impl fmt::Display for BasicEmotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn basic_label_set() -> Vec<String> {
    BasicEmotion::ALL.iter().map(|e| e.as_str().to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub domain: Domain,
    pub emotion_targets: Vec<BasicEmotion>,
}

impl ScenarioSpec {
    /// Targets are deduplicated and kept in canonical order.
    pub fn new(domain: Domain, targets: &[BasicEmotion]) -> Result<Self, AugmentError> {
        if targets.is_empty() {
            return Err(AugmentError::NoTargets);
        }
        let set: std::collections::BTreeSet<_> = targets.iter().copied().collect();
        Ok(ScenarioSpec {
            domain,
            emotion_targets: set.into_iter().collect(),
        })
    }

    pub fn parse(domain: &str, targets: &[&str]) -> Result<Self, AugmentError> {
        let domain = domain.parse()?;
        let targets = targets.iter().map(|t| t.parse()).collect::<Result<Vec<_>, _>>()?;
        ScenarioSpec::new(domain, &targets)
    }

    fn emotion_list(&self) -> String {
        self.emotion_targets.iter().map(|e| e.as_str()).collect::<Vec<_>>().join(", ")
    }
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim();
        }
    }
    t
}

/// Exactly [`SUBTOPIC_COUNT`] distinct subtopics. When a reply falls short,
/// follow-up requests ask only for the missing number and list what is
/// already collected.
pub fn generate_subtopics(
    scenario: &ScenarioSpec,
    client: &ChatClient,
    model_id: &str,
    max_requests: u32,
) -> Result<Vec<String>, AugmentError> {
    let mut out: Vec<String> = Vec::with_capacity(SUBTOPIC_COUNT);
    let mut seen = HashSet::new();
    let mut requests = 0;
    while out.len() < SUBTOPIC_COUNT {
        if requests == max_requests {
            return Err(AugmentError::SubtopicShortfall {
                got: out.len(),
                attempts: requests,
            });
        }
        requests += 1;
        let missing = (SUBTOPIC_COUNT - out.len()).to_string();
        let listed = if out.is_empty() {
            "(none)".to_string()
        } else {
            out.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")
        };
        let prompt = fill(
            templates::SUBTOPICS,
            &[
                ("scenario", scenario.domain.as_str()),
                ("emotions", &scenario.emotion_list()),
                ("count", &missing),
                ("listed", &listed),
            ],
        )
        .expect("subtopic template placeholders are fixed");
        let reply = client.chat(&ChatRequest::new(model_id, prompt))?;
        for line in reply.text.lines() {
            let s = strip_list_marker(line);
            if s.is_empty() || out.len() == SUBTOPIC_COUNT {
                continue;
            }
            if seen.insert(normalize_label(s)) {
                out.push(s.to_string());
            }
        }
        if requests > 1 || out.len() < SUBTOPIC_COUNT {
            tracing::debug!(requests, have = out.len(), domain = %scenario.domain, "subtopic request");
        }
    }
    Ok(out)
}

/// Strict parse of `speaker | emotion | text` lines. Blank lines are
/// ignored; anything else that does not fit aborts the whole dialogue.
pub fn parse_dialogue(raw: &str, dialogue_id: &str, domain: Domain) -> Result<Conversation, AugmentError> {
    let mut utterances = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, '|').map(str::trim).collect();
        let bad = || AugmentError::DialogueParse {
            line: i + 1,
            content: line.to_string(),
        };
        let [speaker, emotion, text] = parts[..] else {
            return Err(bad());
        };
        if speaker.is_empty() || text.is_empty() {
            return Err(bad());
        }
        let label: BasicEmotion = emotion.parse().map_err(|_| AugmentError::LabelOutsideSet {
            line: i + 1,
            label: emotion.to_string(),
        })?;
        utterances.push(Utterance::new(utterances.len(), speaker, text, Some(label.as_str())));
    }
    if utterances.len() < 2 {
        return Err(AugmentError::TooShort(utterances.len()));
    }
    let speakers: HashSet<&str> = utterances.iter().map(|u| u.speaker.as_str()).collect();
    if speakers.len() != 2 {
        return Err(AugmentError::SpeakerCount(speakers.len()));
    }
    Ok(Conversation::new(dialogue_id, utterances)?.with_domain(domain.as_str()))
}

pub fn generate_dialogue(
    subtopic: &str,
    scenario: &ScenarioSpec,
    client: &ChatClient,
    model_id: &str,
    dialogue_id: &str,
) -> Result<Conversation, AugmentError> {
    let labels = basic_label_set().join(", ");
    let prompt = fill(
        templates::DIALOGUE,
        &[
            ("scenario", scenario.domain.as_str()),
            ("subtopic", subtopic),
            ("emotions", &scenario.emotion_list()),
            ("labels", &labels),
        ],
    )
    .expect("dialogue template placeholders are fixed");
    let reply = client.chat(&ChatRequest::new(model_id, prompt))?;
    parse_dialogue(&reply.text, dialogue_id, scenario.domain)
}

/// Utterance counts by domain, then emotion.
pub fn domain_emotion_table(corpus: &Corpus) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut table: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for conv in &corpus.conversations {
        let domain = conv.domain.clone().unwrap_or_default();
        for u in &conv.utterances {
            if let Some(l) = &u.label {
                *table.entry(domain.clone()).or_default().entry(l.clone()).or_default() += 1;
            }
        }
    }
    table
}

/// Checks the shape every augmented corpus must have: the five-category
/// label set, a known domain on every conversation, every utterance
/// labeled, and at most two speakers per dialogue.
pub fn validate_augmented(corpus: &Corpus) -> Result<(), AugmentError> {
    corpus.validate()?;
    if corpus.name != AUGMENTED_DATASET {
        return Err(AugmentError::Invalid(format!("dataset is {:?}", corpus.name)));
    }
    if corpus.label_set != basic_label_set() {
        return Err(AugmentError::Invalid(format!("label set is {:?}", corpus.label_set)));
    }
    for conv in &corpus.conversations {
        let domain = conv
            .domain
            .as_deref()
            .ok_or_else(|| AugmentError::Invalid(format!("conversation {:?} has no domain", conv.id)))?;
        domain.parse::<Domain>()?;
        if !conv.is_fully_labeled() {
            return Err(AugmentError::Invalid(format!("conversation {:?} has unlabeled utterances", conv.id)));
        }
        // Partially accepted dialogues may keep only one speaker.
        if conv.speaker_set().len() > 2 {
            return Err(AugmentError::Invalid(format!(
                "conversation {:?} has {} speakers",
                conv.id,
                conv.speaker_set().len()
            )));
        }
    }
    Ok(())
}
