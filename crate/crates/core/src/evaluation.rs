//! Parsing model outputs into labels, accuracy / weighted-F1 scoring, and
//! the end-to-end prediction pipeline over a corpus.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatClient, ChatRequest, ClientError, Embedder};
use crate::corpus::{normalize_label, Conversation, Corpus, CorpusError};
use crate::knowledge::{extract_knowledge, speaker_traits, KnowledgeBase, KnowledgeError};
use crate::prompting::{assemble_recognition_prompt, ExternalKnowledge, PromptError, MAX_DEMONSTRATIONS};
use crate::retrieval::{Exclusion, Repository, RetrievalError};

#[derive(Debug, Error)]
pub enum StageError {
    #[error("knowledge extraction: {0}")]
    Knowledge(#[from] KnowledgeError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("prompt assembly: {0}")]
    Prompt(#[from] PromptError),
    #[error("recognition call: {0}")]
    Chat(#[from] ClientError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions to score")]
    Empty,
    #[error("prediction for {dialogue_id:?} utterance {index} has no gold label")]
    MissingGold { dialogue_id: String, index: usize },
    #[error("label {label:?} for {dialogue_id:?} utterance {index} is outside the label set")]
    LabelOutsideSet {
        dialogue_id: String,
        index: usize,
        label: String,
    },
    #[error("conversation {dialogue_id:?} utterance {index}: {source}")]
    Utterance {
        dialogue_id: String,
        index: usize,
        #[source]
        source: Box<StageError>,
    },
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
    #[error("{path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl EvalError {
    /// True when the failure came from a model or embedding service.
    pub fn is_upstream(&self) -> bool {
        match self {
            EvalError::Utterance { source, .. } => match source.as_ref() {
                StageError::Chat(_) => true,
                StageError::Knowledge(k) => k.is_upstream(),
                StageError::Retrieval(r) => matches!(r, RetrievalError::QueryEmbedding(_) | RetrievalError::Embedder { .. }),
                StageError::Prompt(_) => false,
            },
            _ => false,
        }
    }
}

fn has_word_at(hay: &str, start: usize, len: usize) -> bool {
    let before = hay[..start].chars().next_back();
    let after = hay[start + len..].chars().next();
    !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
}

fn contains_word(hay: &str, needle: &str) -> bool {
    !needle.is_empty() && hay.match_indices(needle).any(|(i, m)| has_word_at(hay, i, m.len()))
}

/// Maps raw model text to a label: an exact (trimmed, lowercased) match
/// first, then a unique whole-word occurrence. `None` marks invalid output.
pub fn parse_prediction(raw: &str, label_set: &[String]) -> Option<String> {
    let norm = normalize_label(raw);
    if let Some(l) = label_set.iter().find(|l| normalize_label(l) == norm) {
        return Some(l.clone());
    }
    let mut found = label_set.iter().filter(|l| contains_word(&norm, &normalize_label(l)));
    match (found.next(), found.next()) {
        (Some(l), None) => Some(l.clone()),
        _ => None,
    }
}

/// One line of the prediction log. `parsed` is `None` for invalid output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub dialogue_id: String,
    pub index: usize,
    pub raw: String,
    pub parsed: Option<String>,
    pub gold: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: BTreeMap<String, ClassScore>,
    pub invalid_count: usize,
    pub n: usize,
}

/// Accuracy and support-weighted F1. Invalid predictions count as wrong
/// for every class. A class nobody predicted has precision 0.
pub fn score(predictions: &[Prediction], label_set: &[String]) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let slot: HashMap<&str, usize> = label_set.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let outside = |p: &Prediction, label: &str| EvalError::LabelOutsideSet {
        dialogue_id: p.dialogue_id.clone(),
        index: p.index,
        label: label.to_string(),
    };
    let c = label_set.len();
    let (mut tp, mut predicted, mut support) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    let (mut correct, mut invalid) = (0usize, 0usize);
    for p in predictions {
        let gold = p.gold.as_deref().ok_or_else(|| EvalError::MissingGold {
            dialogue_id: p.dialogue_id.clone(),
            index: p.index,
        })?;
        let g = *slot.get(gold).ok_or_else(|| outside(p, gold))?;
        support[g] += 1;
        match &p.parsed {
            None => invalid += 1,
            Some(label) => {
                let q = *slot.get(label.as_str()).ok_or_else(|| outside(p, label))?;
                predicted[q] += 1;
                if q == g {
                    tp[q] += 1;
                    correct += 1;
                }
            }
        }
    }
    let n = predictions.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut per_class = BTreeMap::new();
    let mut weighted_f1 = 0.0;
    for (i, label) in label_set.iter().enumerate() {
        let precision = ratio(tp[i], predicted[i]);
        let recall = ratio(tp[i], support[i]);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        if support[i] > 0 {
            weighted_f1 += support[i] as f64 / n as f64 * f1;
        }
        per_class.insert(
            label.clone(),
            ClassScore {
                precision,
                recall,
                f1,
                support: support[i],
            },
        );
    }
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        weighted_f1,
        per_class,
        invalid_count: invalid,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub w: usize,
    pub retrieval_k: usize,
    /// Recognition model; `{seed}` is replaced by the run's seed.
    pub model_id: String,
    /// Model used for knowledge extraction when no knowledge file is given.
    pub knowledge_model_id: String,
    /// Keep demonstrations from the query's own dialogue out of its prompt.
    pub exclude_own_dialogue: bool,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            w: 5,
            retrieval_k: MAX_DEMONSTRATIONS,
            model_id: "stub".into(),
            knowledge_model_id: "stub".into(),
            exclude_own_dialogue: true,
            workers: 4,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.w == 0 {
            return Err(EvalError::Config("w must be at least 1".into()));
        }
        if self.retrieval_k > MAX_DEMONSTRATIONS {
            return Err(EvalError::Config(format!("retrieval_k must be at most {MAX_DEMONSTRATIONS}")));
        }
        if self.workers == 0 {
            return Err(EvalError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn model_for_seed(&self, seed: u64) -> String {
        self.model_id.replace("{seed}", &seed.to_string())
    }
}

/// Demonstration source for the pipeline. Without a repository prompts
/// carry no demonstrations.
pub struct Demonstrations<'a> {
    pub repo: &'a Repository,
    pub embedder: &'a dyn Embedder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub dialogue_id: String,
    pub index: usize,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub seed: u64,
    pub predictions: Vec<Prediction>,
    pub prompts: Vec<PromptRecord>,
}

struct Job<'c> {
    conv: usize,
    index: usize,
    traits: &'c BTreeMap<String, String>,
}

/// The rendered recognition prompt for one utterance: retrieval on the raw
/// text (skipping the own dialogue when configured), then assembly.
pub fn recognition_prompt(
    corpus: &Corpus,
    conv: &Conversation,
    index: usize,
    config: &PipelineConfig,
    demos: Option<&Demonstrations<'_>>,
    knowledge: &ExternalKnowledge,
) -> Result<String, StageError> {
    let target = conv.utterances.get(index).ok_or_else(|| {
        PromptError::Corpus(CorpusError::IndexOutOfRange {
            id: conv.id.clone(),
            index,
            len: conv.len(),
        })
    })?;
    let retrieved = match (demos, config.retrieval_k) {
        (Some(d), k) if k > 0 && !d.repo.is_empty() => {
            let mut exclusion = Exclusion::new();
            if config.exclude_own_dialogue {
                exclusion.insert((corpus.name.clone(), conv.id.clone()));
            }
            match crate::retrieval::retrieve_top_k(d.repo, &target.text, k, Some(&exclusion), d.embedder) {
                Ok(r) => r,
                Err(RetrievalError::NoEligibleEntries) => Vec::new(),
                Err(e) => return Err(e.into()),
            }
        }
        _ => Vec::new(),
    };
    Ok(assemble_recognition_prompt(conv, index, config.w, knowledge, &retrieved, &corpus.label_set)?.render())
}

/// Runs knowledge, retrieval, prompt assembly and the recognition call for
/// every utterance. Results come back in corpus order regardless of worker
/// count.
pub fn predict_corpus(
    corpus: &Corpus,
    config: &PipelineConfig,
    client: &ChatClient,
    demos: Option<&Demonstrations<'_>>,
    knowledge: Option<&KnowledgeBase>,
    seed: u64,
) -> Result<RunOutput, EvalError> {
    config.validate()?;
    let model_id = config.model_for_seed(seed);
    let fail = |dialogue_id: &str, index: usize, source: StageError| EvalError::Utterance {
        dialogue_id: dialogue_id.to_string(),
        index,
        source: Box::new(source),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| EvalError::Config(e.to_string()))?;

    pool.install(|| {
        let traits: Vec<BTreeMap<String, String>> = if knowledge.is_some() {
            vec![BTreeMap::new(); corpus.conversations.len()]
        } else {
            corpus
                .conversations
                .par_iter()
                .map(|conv| speaker_traits(client, &config.knowledge_model_id, conv).map_err(|e| fail(&conv.id, 0, e.into())))
                .collect::<Result<_, _>>()?
        };
        let jobs: Vec<Job<'_>> = corpus
            .conversations
            .iter()
            .enumerate()
            .flat_map(|(c, conv)| (0..conv.len()).map(move |index| (c, index)))
            .map(|(conv, index)| Job {
                conv,
                index,
                traits: &traits[conv],
            })
            .collect();

        let results: Vec<(Prediction, PromptRecord)> = jobs
            .par_iter()
            .map(|job| {
                let conv = &corpus.conversations[job.conv];
                let err = |e: StageError| fail(&conv.id, job.index, e);
                let ek = match knowledge {
                    Some(base) => base.get(&(conv.id.clone(), job.index)).cloned().unwrap_or_default(),
                    None => extract_knowledge(client, &config.knowledge_model_id, conv, job.index, config.w, job.traits)
                        .map_err(|e| err(e.into()))?,
                };
                let target = &conv.utterances[job.index];
                let prompt = recognition_prompt(corpus, conv, job.index, config, demos, &ek).map_err(err)?;
                let raw = client
                    .chat(&ChatRequest::new(&model_id, prompt.clone()))
                    .map_err(|e| err(e.into()))?
                    .text;
                Ok((
                    Prediction {
                        dialogue_id: conv.id.clone(),
                        index: job.index,
                        parsed: parse_prediction(&raw, &corpus.label_set),
                        raw,
                        gold: target.label.clone(),
                    },
                    PromptRecord {
                        dialogue_id: conv.id.clone(),
                        index: job.index,
                        prompt,
                    },
                ))
            })
            .collect::<Result<_, EvalError>>()?;
        let (predictions, prompts) = results.into_iter().unzip();
        Ok(RunOutput { seed, predictions, prompts })
    })
}

/// Per-seed reports and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<SeedReport>,
    pub mean_accuracy: f64,
    pub mean_weighted_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub report: EvalReport,
}

pub fn aggregate(runs: Vec<SeedReport>) -> Result<ExperimentReport, EvalError> {
    if runs.is_empty() {
        return Err(EvalError::Empty);
    }
    let m = runs.len() as f64;
    Ok(ExperimentReport {
        mean_accuracy: runs.iter().map(|r| r.report.accuracy).sum::<f64>() / m,
        mean_weighted_f1: runs.iter().map(|r| r.report.weighted_f1).sum::<f64>() / m,
        runs,
    })
}

/// Predicts and scores the corpus once per seed.
pub fn run_experiment(
    corpus: &Corpus,
    config: &PipelineConfig,
    client: &ChatClient,
    demos: Option<&Demonstrations<'_>>,
    knowledge: Option<&KnowledgeBase>,
    seeds: &[u64],
) -> Result<(ExperimentReport, Vec<RunOutput>), EvalError> {
    let mut outputs = Vec::with_capacity(seeds.len());
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let out = predict_corpus(corpus, config, client, demos, knowledge, seed)?;
        runs.push(SeedReport {
            seed,
            report: score(&out.predictions, &corpus.label_set)?,
        });
        outputs.push(out);
    }
    Ok((aggregate(runs)?, outputs))
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_prediction_log(predictions: &[Prediction], path: &Path) -> Result<(), EvalError> {
    write_jsonl(predictions, path)
}

pub fn write_prompt_log(prompts: &[PromptRecord], path: &Path) -> Result<(), EvalError> {
    write_jsonl(prompts, path)
}

pub fn read_prediction_log(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Re-applies the parse rule to logged raw outputs.
pub fn reparse(predictions: &mut [Prediction], label_set: &[String]) {
    for p in predictions {
        p.parsed = parse_prediction(&p.raw, label_set);
    }
}

pub fn write_report<T: Serialize>(report: &T, path: &Path) -> Result<(), EvalError> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
