//! Prompt construction.
//!
//! Three families: explicit/implicit emotion interpretation over a history
//! window, speaker characteristics over a whole conversation, and the
//! five-part recognition prompt (Instruction, Historical Content, External
//! Knowledge, Demonstration Retrieval, Label Statement). Wording lives in
//! the resource files under `templates/`; sections are delimited by `### `
//! headers so both the stub backend and tests can parse them back.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{history_window, Conversation, CorpusError, Utterance};
use crate::retrieval::RetrievalResult;

/// Bumped whenever any template's wording changes.
pub const TEMPLATE_VERSION: u32 = 1;

/// Most demonstrations a recognition prompt may carry.
pub const MAX_DEMONSTRATIONS: usize = 3;

pub mod templates {
    pub const RECOGNITION: &str = include_str!("../templates/recognition.txt");
    pub const INTERPRETATION: &str = include_str!("../templates/interpretation.txt");
    pub const DIRECTIVE_EXPLICIT: &str = include_str!("../templates/directive_explicit.txt");
    pub const DIRECTIVE_IMPLICIT: &str = include_str!("../templates/directive_implicit.txt");
    pub const SPEAKER: &str = include_str!("../templates/speaker.txt");
    pub const SUBTOPICS: &str = include_str!("../templates/subtopics.txt");
    pub const DIALOGUE: &str = include_str!("../templates/dialogue.txt");
}

pub mod markers {
    pub const INSTRUCTION: &str = "### Instruction";
    pub const HISTORY: &str = "### Historical Content";
    pub const KNOWLEDGE: &str = "### External Knowledge";
    pub const DEMONSTRATIONS: &str = "### Demonstration Retrieval";
    pub const LABEL_STATEMENT: &str = "### Label Statement";
    pub const INTERPRETATION_TASK: &str = "### Interpretation Task";
    pub const SPEAKER_TASK: &str = "### Speaker Profile Task";
    pub const SUBTOPIC_REQUEST: &str = "### Subtopic Request";
    pub const ALREADY_LISTED: &str = "### Already Listed";
    pub const DIALOGUE_REQUEST: &str = "### Dialogue Request";

    /// The five recognition sections in their fixed order.
    pub const RECOGNITION_ORDER: [&str; 5] = [INSTRUCTION, HISTORY, KNOWLEDGE, DEMONSTRATIONS, LABEL_STATEMENT];

    pub const TARGET_PREFIX: &str = ">> ";
    pub const LIST_ITEM: &str = "- ";
    pub const NO_DEMONSTRATIONS: &str = "(no demonstrations retrieved)";
    pub const NO_KNOWLEDGE: &str = "(no external knowledge)";
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("history does not end at the target utterance")]
    HistoryTargetMismatch,
    #[error("speaker {0:?} does not appear in the conversation")]
    UnknownSpeaker(String),
    #[error("{0} demonstrations given, at most {MAX_DEMONSTRATIONS} allowed")]
    TooManyDemonstrations(usize),
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("template references unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
    #[error("external knowledge text for {0} is empty")]
    EmptyKnowledge(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Body of the section introduced by `header`, up to the next `### ` line.
pub fn section<'a>(prompt: &'a str, header: &str) -> Option<&'a str> {
    let mut offset = 0;
    let mut start = None;
    for line in prompt.split_inclusive('\n') {
        let bare = line.trim_end_matches(['\n', '\r']);
        match start {
            None if bare == header => start = Some(offset + line.len()),
            Some(s) if bare.starts_with("### ") => return Some(&prompt[s..offset]),
            _ => {}
        }
        offset += line.len();
    }
    start.map(|s| &prompt[s..])
}

/// Substitutes `{name}` placeholders in one pass, so braces inside inserted
/// values are never re-expanded.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .find(|c: char| !(c.is_ascii_lowercase() || c == '_'))
            .unwrap_or(after.len());
        if name_len > 0 && after[name_len..].starts_with('}') {
            let name = &after[..name_len];
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?;
            out.push_str(value);
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Collapses line breaks so one utterance always renders as one line.
fn one_line(s: &str) -> String {
    s.split(['\n', '\r']).filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" ")
}

fn history_lines(history: &[Utterance], mark_target: bool) -> String {
    let last = history.len().saturating_sub(1);
    history
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let prefix = if mark_target && i == last { markers::TARGET_PREFIX } else { "" };
            format!("{prefix}[{}] {}: {}", u.index, one_line(&u.speaker), one_line(&u.text))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn describe_target(u: &Utterance) -> String {
    format!("utterance [{}] spoken by {}", u.index, one_line(&u.speaker))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpretationKind {
    Explicit,
    Implicit,
}

pub fn build_interpretation_prompt(
    history: &[Utterance],
    target: &Utterance,
    kind: InterpretationKind,
) -> Result<String, PromptError> {
    let last = history.last().ok_or(PromptError::EmptyHistory)?;
    if last != target {
        return Err(PromptError::HistoryTargetMismatch);
    }
    let speaker = one_line(&target.speaker);
    let directive = match kind {
        InterpretationKind::Explicit => templates::DIRECTIVE_EXPLICIT,
        InterpretationKind::Implicit => templates::DIRECTIVE_IMPLICIT,
    };
    let directive = fill(directive.trim_end(), &[("speaker", &speaker)])?;
    fill(
        templates::INTERPRETATION,
        &[
            ("history", &history_lines(history, true)),
            ("directive", &directive),
            ("target", &describe_target(target)),
        ],
    )
}

pub fn build_speaker_prompt(conv: &Conversation, speaker: &str) -> Result<String, PromptError> {
    if !conv.utterances.iter().any(|u| u.speaker == speaker) {
        return Err(PromptError::UnknownSpeaker(speaker.to_string()));
    }
    fill(
        templates::SPEAKER,
        &[
            ("history", &history_lines(&conv.utterances, false)),
            ("speaker", &one_line(speaker)),
        ],
    )
}

/// Speaker traits and the two interpretations injected into a recognition
/// prompt.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalKnowledge {
    #[serde(default)]
    pub speaker_traits: BTreeMap<String, String>,
    #[serde(default)]
    pub explicit_interpretation: Option<String>,
    #[serde(default)]
    pub implicit_interpretation: Option<String>,
}

impl ExternalKnowledge {
    fn validate(&self, conv: &Conversation) -> Result<(), PromptError> {
        for (speaker, text) in &self.speaker_traits {
            if !conv.utterances.iter().any(|u| &u.speaker == speaker) {
                return Err(PromptError::UnknownSpeaker(speaker.clone()));
            }
            if text.trim().is_empty() {
                return Err(PromptError::EmptyKnowledge(format!("speaker {speaker}")));
            }
        }
        for (name, text) in [
            ("explicit interpretation", &self.explicit_interpretation),
            ("implicit interpretation", &self.implicit_interpretation),
        ] {
            if text.as_deref().is_some_and(|t| t.trim().is_empty()) {
                return Err(PromptError::EmptyKnowledge(name.into()));
            }
        }
        Ok(())
    }

    fn render(&self, conv: &Conversation) -> String {
        let mut out = String::new();
        if !self.speaker_traits.is_empty() {
            out.push_str("Speaker characteristics:\n");
            for speaker in conv.speakers() {
                if let Some(t) = self.speaker_traits.get(speaker) {
                    let _ = writeln!(out, "{}{}: {}", markers::LIST_ITEM, one_line(speaker), one_line(t));
                }
            }
        }
        if let Some(t) = &self.explicit_interpretation {
            let _ = writeln!(out, "Explicit emotion interpretation: {}", one_line(t));
        }
        if let Some(t) = &self.implicit_interpretation {
            let _ = writeln!(out, "Implicit emotion interpretation: {}", one_line(t));
        }
        if out.is_empty() {
            markers::NO_KNOWLEDGE.to_string()
        } else {
            out.trim_end().to_string()
        }
    }
}

/// The recognition prompt, component by component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub instruction: String,
    pub history_block: String,
    pub knowledge_block: String,
    /// `(text, label)` pairs in retrieval order.
    pub demonstrations: Vec<(String, String)>,
    pub label_statement: String,
    pub target: String,
}

impl PromptBundle {
    fn demo_block(&self) -> String {
        if self.demonstrations.is_empty() {
            return markers::NO_DEMONSTRATIONS.to_string();
        }
        self.demonstrations
            .iter()
            .map(|(text, label)| format!("{}\"{}\" => {}", markers::LIST_ITEM, one_line(text), one_line(label)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn render(&self) -> String {
        fill(
            templates::RECOGNITION,
            &[
                ("history", &self.history_block),
                ("knowledge", &self.knowledge_block),
                ("demos", &self.demo_block()),
                ("target", &self.target),
                ("labels", &self.label_statement),
            ],
        )
        .expect("recognition template placeholders are fixed")
    }
}

pub fn assemble_recognition_prompt(
    conv: &Conversation,
    target_index: usize,
    w: usize,
    knowledge: &ExternalKnowledge,
    demos: &[RetrievalResult<'_>],
    label_set: &[String],
) -> Result<PromptBundle, PromptError> {
    if demos.len() > MAX_DEMONSTRATIONS {
        return Err(PromptError::TooManyDemonstrations(demos.len()));
    }
    if label_set.is_empty() {
        return Err(PromptError::EmptyLabelSet);
    }
    knowledge.validate(conv)?;
    let history = history_window(conv, target_index, w)?;
    let target = &conv.utterances[target_index];
    let instruction = section(templates::RECOGNITION, markers::INSTRUCTION)
        .unwrap_or_default()
        .trim()
        .to_string();
    Ok(PromptBundle {
        instruction,
        history_block: history_lines(history, true),
        knowledge_block: knowledge.render(conv),
        demonstrations: demos
            .iter()
            .map(|d| (d.entry.text.clone(), d.entry.label.clone()))
            .collect(),
        label_statement: label_set
            .iter()
            .map(|l| format!("{}{}", markers::LIST_ITEM, l))
            .collect::<Vec<_>>()
            .join("\n"),
        target: describe_target(target),
    })
}

/// Labels listed in a rendered recognition prompt, in order.
pub fn listed_labels(prompt: &str) -> Vec<&str> {
    section(prompt, markers::LABEL_STATEMENT)
        .map(|s| {
            s.lines()
                .filter_map(|l| l.strip_prefix(markers::LIST_ITEM))
                .map(str::trim)
                .collect()
        })
        .unwrap_or_default()
}
