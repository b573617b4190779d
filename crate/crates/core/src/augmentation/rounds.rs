use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::annotation::{AgreementView, AnnotationSample, AnnotationStore, SampleStatus, StoreData};
use super::{
    basic_label_set, generate_dialogue, generate_subtopics, AugmentError, BasicEmotion, Domain, ScenarioSpec,
    AUGMENTED_DATASET, MAX_ROUNDS, SUBTOPIC_COUNT,
};
use crate::client::ChatClient;
use crate::corpus::{Conversation, Corpus, Split, Utterance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub model_id: String,
    pub domains: Vec<Domain>,
    /// Subtopic requests allowed per scenario before giving up.
    pub subtopic_requests: u32,
    /// Generation stops once every deficit emotion has this many times its
    /// deficit in generated utterances, to leave room for rejections.
    pub oversample: f64,
    pub max_dialogues_per_round: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            model_id: "stub".into(),
            domains: Domain::ALL.to_vec(),
            subtopic_requests: 3,
            oversample: 2.0,
            max_dialogues_per_round: Domain::ALL.len() * SUBTOPIC_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationRound {
    pub round_index: u32,
    pub deficit: BTreeMap<BasicEmotion, usize>,
    pub scenarios: Vec<ScenarioSpec>,
    pub generated_dialogues: usize,
    pub generated_utterances: usize,
    /// Dialogues whose model output failed the strict parse.
    pub discarded_dialogues: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub ingested_dialogues: usize,
    pub closed: bool,
}

/// Everything needed to resume the loop from disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerState {
    pub targets: BTreeMap<BasicEmotion, usize>,
    pub base_counts: BTreeMap<BasicEmotion, usize>,
    pub rounds: Vec<AugmentationRound>,
    pub augmented: Vec<Conversation>,
    pub samples: Vec<AnnotationSample>,
    pub dialogues: Vec<Conversation>,
}

/// Drives up to three generate / annotate / ingest rounds toward
/// per-emotion target counts.
#[derive(Debug)]
pub struct AugmentationController {
    targets: BTreeMap<BasicEmotion, usize>,
    base_counts: BTreeMap<BasicEmotion, usize>,
    rounds: Vec<AugmentationRound>,
    augmented: Vec<Conversation>,
    store: AnnotationStore,
}

fn count_labels<'a>(convs: impl IntoIterator<Item = &'a Conversation>) -> BTreeMap<BasicEmotion, usize> {
    let mut counts = BTreeMap::new();
    for conv in convs {
        for u in &conv.utterances {
            if let Some(e) = u.label.as_deref().and_then(|l| l.parse::<BasicEmotion>().ok()) {
                *counts.entry(e).or_default() += 1;
            }
        }
    }
    counts
}

impl AugmentationController {
    /// `base` is data already available; its five-category labels count
    /// toward the targets.
    pub fn new(targets: BTreeMap<BasicEmotion, usize>, base: Option<&Corpus>) -> Self {
        AugmentationController {
            targets,
            base_counts: base.map(|c| count_labels(&c.conversations)).unwrap_or_default(),
            rounds: Vec::new(),
            augmented: Vec::new(),
            store: AnnotationStore::new(),
        }
    }

    pub fn from_state(state: ControllerState) -> Result<Self, AugmentError> {
        for conv in state.augmented.iter().chain(&state.dialogues) {
            conv.validate()?;
        }
        if state.rounds.len() > MAX_ROUNDS as usize || state.rounds.iter().rev().skip(1).any(|r| !r.closed) {
            return Err(AugmentError::Invalid("inconsistent round history".into()));
        }
        Ok(AugmentationController {
            targets: state.targets,
            base_counts: state.base_counts,
            rounds: state.rounds,
            augmented: state.augmented,
            store: AnnotationStore::from_data(StoreData {
                samples: state.samples,
                dialogues: state.dialogues,
            }),
        })
    }

    pub fn state(&self) -> ControllerState {
        let data = self.store.data();
        ControllerState {
            targets: self.targets.clone(),
            base_counts: self.base_counts.clone(),
            rounds: self.rounds.clone(),
            augmented: self.augmented.clone(),
            samples: data.samples,
            dialogues: data.dialogues,
        }
    }

    /// Writes the state through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let json = serde_json::to_vec_pretty(&self.state()).map_err(std::io::Error::other)?;
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)
    }

    pub fn load(path: &Path) -> Result<Self, AugmentError> {
        let raw = std::fs::read(path)
            .map_err(|e| AugmentError::Invalid(format!("cannot read state {}: {e}", path.display())))?;
        let state: ControllerState = serde_json::from_slice(&raw)
            .map_err(|e| AugmentError::Invalid(format!("state {}: {e}", path.display())))?;
        AugmentationController::from_state(state)
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    pub fn rounds(&self) -> &[AugmentationRound] {
        &self.rounds
    }

    /// Number of rounds started so far.
    pub fn round(&self) -> u32 {
        self.rounds.len() as u32
    }

    pub fn open_round(&self) -> Option<&AugmentationRound> {
        self.rounds.last().filter(|r| !r.closed)
    }

    pub fn targets(&self) -> &BTreeMap<BasicEmotion, usize> {
        &self.targets
    }

    pub fn counts(&self) -> BTreeMap<BasicEmotion, usize> {
        let mut counts = self.base_counts.clone();
        for (e, n) in count_labels(&self.augmented) {
            *counts.entry(e).or_default() += n;
        }
        counts
    }

    /// Missing utterances per emotion; emotions at or above target are omitted.
    pub fn deficit(&self) -> BTreeMap<BasicEmotion, usize> {
        let counts = self.counts();
        self.targets
            .iter()
            .map(|(e, t)| (*e, t.saturating_sub(counts.get(e).copied().unwrap_or(0))))
            .filter(|(_, d)| *d > 0)
            .collect()
    }

    /// Generates and enqueues the next round's dialogues. Returns `None`
    /// once the round limit is reached; a round with no deficit is
    /// recorded as closed without any generation.
    pub fn start_round(&mut self, client: &ChatClient, config: &GenerationConfig) -> Result<Option<&AugmentationRound>, AugmentError> {
        if let Some(open) = self.open_round() {
            return Err(AugmentError::RoundOpen(open.round_index));
        }
        if self.round() >= MAX_ROUNDS {
            tracing::info!(deficit = ?self.deficit(), "round limit reached");
            return Ok(None);
        }
        let round_index = self.round() + 1;
        let deficit = self.deficit();
        let mut round = AugmentationRound {
            round_index,
            deficit: deficit.clone(),
            scenarios: Vec::new(),
            generated_dialogues: 0,
            generated_utterances: 0,
            discarded_dialogues: 0,
            accepted: 0,
            rejected: 0,
            ingested_dialogues: 0,
            closed: deficit.is_empty(),
        };
        if deficit.is_empty() || config.domains.is_empty() {
            round.closed = true;
            self.rounds.push(round);
            return Ok(self.rounds.last());
        }

        let wanted: Vec<BasicEmotion> = deficit.keys().copied().collect();
        round.scenarios = config
            .domains
            .iter()
            .map(|d| ScenarioSpec::new(*d, &wanted))
            .collect::<Result<_, _>>()?;
        let subtopics = round
            .scenarios
            .iter()
            .map(|s| generate_subtopics(s, client, &config.model_id, config.subtopic_requests))
            .collect::<Result<Vec<_>, _>>()?;

        let quota: HashMap<BasicEmotion, usize> = deficit
            .iter()
            .map(|(e, d)| (*e, (*d as f64 * config.oversample.max(1.0)).ceil() as usize))
            .collect();
        let mut produced: HashMap<BasicEmotion, usize> = HashMap::new();
        let satisfied = |p: &HashMap<BasicEmotion, usize>| quota.iter().all(|(e, q)| p.get(e).copied().unwrap_or(0) >= *q);
        let mut dialogues = Vec::new();
        'outer: for j in 0..SUBTOPIC_COUNT {
            for (spec, topics) in round.scenarios.iter().zip(&subtopics) {
                if satisfied(&produced) || dialogues.len() >= config.max_dialogues_per_round {
                    break 'outer;
                }
                let id = format!("r{round_index}-{}-{:02}", spec.domain, j + 1);
                match generate_dialogue(&topics[j], spec, client, &config.model_id, &id) {
                    Ok(conv) => {
                        for (e, n) in count_labels([&conv]) {
                            *produced.entry(e).or_default() += n;
                        }
                        round.generated_utterances += conv.len();
                        dialogues.push(conv);
                    }
                    Err(e) if e.is_upstream() => return Err(e),
                    Err(e) => {
                        tracing::warn!(dialogue = %id, error = %e, "discarding generated dialogue");
                        round.discarded_dialogues += 1;
                    }
                }
            }
        }
        round.generated_dialogues = dialogues.len();
        self.store.mask_and_enqueue(&dialogues, round_index)?;
        self.rounds.push(round);
        Ok(self.rounds.last())
    }

    /// Ingests the open round's accepted utterances. Each dialogue keeps
    /// its accepted utterances in order, renumbered from 0.
    pub fn close_round(&mut self) -> Result<&AugmentationRound, AugmentError> {
        let round_index = self.open_round().ok_or(AugmentError::NoOpenRound)?.round_index;
        let pending = self.store.pending_in_round(round_index);
        if pending > 0 {
            return Err(AugmentError::PendingSamples(pending));
        }
        let samples: Vec<AnnotationSample> = self.store.samples().into_iter().filter(|s| s.round == round_index).collect();
        let mut accepted_by_dialogue: BTreeMap<&str, Vec<&AnnotationSample>> = BTreeMap::new();
        let (mut accepted, mut rejected) = (0, 0);
        for s in &samples {
            match s.status {
                SampleStatus::Accepted => {
                    accepted += 1;
                    accepted_by_dialogue.entry(&s.dialogue_id).or_default().push(s);
                }
                SampleStatus::Rejected => rejected += 1,
                SampleStatus::Pending => unreachable!("checked above"),
            }
        }
        let mut ingested = 0;
        let mut seen = std::collections::HashSet::new();
        let order = samples.iter().map(|s| s.dialogue_id.as_str()).filter(|d| seen.insert(*d));
        for dialogue_id in order {
            let Some(kept) = accepted_by_dialogue.get(dialogue_id) else {
                continue;
            };
            let source = self
                .store
                .dialogue(dialogue_id)
                .ok_or_else(|| AugmentError::Invalid(format!("dialogue {dialogue_id:?} missing from store")))?;
            let mut kept = kept.clone();
            kept.sort_by_key(|s| s.index);
            let utterances = kept
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let speaker = &source.utterances[s.index].speaker;
                    Utterance::new(i, speaker.clone(), s.text.clone(), Some(s.original_label.as_str()))
                })
                .collect();
            let mut conv = Conversation::new(dialogue_id, utterances)?;
            conv.domain = source.domain.clone();
            self.augmented.push(conv);
            ingested += 1;
        }
        let round = self.rounds.last_mut().expect("open round exists");
        round.accepted = accepted;
        round.rejected = rejected;
        round.ingested_dialogues = ingested;
        round.closed = true;
        Ok(round)
    }

    /// Start, annotate through the callback, close. Returns `None` once
    /// the round limit is reached.
    pub fn run_round(
        &mut self,
        client: &ChatClient,
        config: &GenerationConfig,
        annotate: impl FnOnce(&AnnotationStore),
    ) -> Result<Option<AugmentationRound>, AugmentError> {
        let Some(round) = self.start_round(client, config)? else {
            return Ok(None);
        };
        if round.closed {
            return Ok(Some(round.clone()));
        }
        annotate(&self.store);
        Ok(Some(self.close_round()?.clone()))
    }

    pub fn augmented_corpus(&self) -> Result<Corpus, AugmentError> {
        Ok(Corpus::new(AUGMENTED_DATASET, Split::None, basic_label_set(), self.augmented.clone())?)
    }

    pub fn agreement(&self) -> AgreementView {
        let progress = self.store.progress();
        AgreementView {
            round: self.round(),
            max_rounds: MAX_ROUNDS,
            round_open: self.open_round().is_some(),
            by_emotion: progress.by_emotion,
            by_domain: progress.by_domain,
            targets: self.targets.clone(),
            deficit: self.deficit(),
        }
    }
}
