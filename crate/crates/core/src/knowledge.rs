//! Knowledge extraction: speaker profiles over whole conversations and
//! explicit/implicit interpretations over each utterance's history window.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatClient, ChatRequest, ClientError};
use crate::corpus::{history_window, Conversation, Corpus, CorpusError};
use crate::prompting::{build_interpretation_prompt, build_speaker_prompt, ExternalKnowledge, InterpretationKind, PromptError};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("conversation {dialogue_id:?} utterance {index}: {source}")]
    Prompt {
        dialogue_id: String,
        index: usize,
        #[source]
        source: PromptError,
    },
    #[error("conversation {dialogue_id:?} utterance {index}: {source}")]
    Window {
        dialogue_id: String,
        index: usize,
        #[source]
        source: CorpusError,
    },
    #[error("conversation {dialogue_id:?}: model call failed: {source}")]
    Chat {
        dialogue_id: String,
        #[source]
        source: ClientError,
    },
    #[error("conversation {dialogue_id:?}: model returned empty {what}")]
    EmptyResponse { dialogue_id: String, what: String },
    #[error("{path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl KnowledgeError {
    pub fn is_upstream(&self) -> bool {
        matches!(self, KnowledgeError::Chat { .. } | KnowledgeError::EmptyResponse { .. })
    }
}

fn ask(client: &ChatClient, model_id: &str, prompt: String, dialogue_id: &str, what: &str) -> Result<String, KnowledgeError> {
    let resp = client
        .chat(&ChatRequest::new(model_id, prompt))
        .map_err(|source| KnowledgeError::Chat {
            dialogue_id: dialogue_id.to_string(),
            source,
        })?;
    let text = resp.text.trim();
    if text.is_empty() {
        return Err(KnowledgeError::EmptyResponse {
            dialogue_id: dialogue_id.to_string(),
            what: what.to_string(),
        });
    }
    Ok(text.to_string())
}

/// One profile per speaker, each built from the entire conversation.
pub fn speaker_traits(client: &ChatClient, model_id: &str, conv: &Conversation) -> Result<BTreeMap<String, String>, KnowledgeError> {
    let mut traits = BTreeMap::new();
    for speaker in conv.speakers() {
        let prompt = build_speaker_prompt(conv, speaker).map_err(|source| KnowledgeError::Prompt {
            dialogue_id: conv.id.clone(),
            index: 0,
            source,
        })?;
        let text = ask(client, model_id, prompt, &conv.id, &format!("profile for {speaker}"))?;
        traits.insert(speaker.to_string(), text);
    }
    Ok(traits)
}

/// Both interpretations for one target utterance, combined with
/// precomputed speaker traits.
pub fn extract_knowledge(
    client: &ChatClient,
    model_id: &str,
    conv: &Conversation,
    target_index: usize,
    w: usize,
    traits: &BTreeMap<String, String>,
) -> Result<ExternalKnowledge, KnowledgeError> {
    let history = history_window(conv, target_index, w).map_err(|source| KnowledgeError::Window {
        dialogue_id: conv.id.clone(),
        index: target_index,
        source,
    })?;
    let target = &conv.utterances[target_index];
    let interpret = |kind: InterpretationKind| {
        let prompt = build_interpretation_prompt(history, target, kind).map_err(|source| KnowledgeError::Prompt {
            dialogue_id: conv.id.clone(),
            index: target_index,
            source,
        })?;
        ask(client, model_id, prompt, &conv.id, &format!("{kind:?} interpretation").to_lowercase())
    };
    let explicit = interpret(InterpretationKind::Explicit)?;
    let implicit = interpret(InterpretationKind::Implicit)?;
    Ok(ExternalKnowledge {
        speaker_traits: traits.clone(),
        explicit_interpretation: Some(explicit),
        implicit_interpretation: Some(implicit),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub dialogue_id: String,
    pub index: usize,
    pub knowledge: ExternalKnowledge,
}

/// Knowledge for every utterance of every conversation, in corpus order.
/// Conversations are processed in parallel; model calls stay bounded by
/// the client's in-flight limit.
pub fn extract_corpus_knowledge(client: &ChatClient, model_id: &str, corpus: &Corpus, w: usize) -> Result<Vec<KnowledgeRecord>, KnowledgeError> {
    let per_conv: Vec<Vec<KnowledgeRecord>> = corpus
        .conversations
        .par_iter()
        .map(|conv| {
            let traits = speaker_traits(client, model_id, conv)?;
            (0..conv.len())
                .map(|i| {
                    Ok(KnowledgeRecord {
                        dialogue_id: conv.id.clone(),
                        index: i,
                        knowledge: extract_knowledge(client, model_id, conv, i, w, &traits)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_, KnowledgeError>>()?;
    Ok(per_conv.into_iter().flatten().collect())
}

/// Extracted knowledge keyed by `(dialogue_id, index)`.
pub type KnowledgeBase = HashMap<(String, usize), ExternalKnowledge>;

pub fn save_knowledge(records: &[KnowledgeRecord], path: &Path) -> Result<(), KnowledgeError> {
    let io = |source| KnowledgeError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn load_knowledge(path: &Path) -> Result<KnowledgeBase, KnowledgeError> {
    let io = |source| KnowledgeError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut base = KnowledgeBase::new();
    for (i, line) in BufReader::new(File::open(path).map_err(io)?).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let r: KnowledgeRecord = serde_json::from_str(&line).map_err(|e| KnowledgeError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        base.insert((r.dialogue_id, r.index), r.knowledge);
    }
    Ok(base)
}
