//! Offline backends. Both are pure functions of their input.

use super::{BackendError, ChatBackend, ChatRequest, ClientError, Completion, Embedder, Usage};
use crate::prompting::{markers, section};

pub const DEFAULT_STUB_DIM: usize = 256;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Answers each prompt family with a fixed rule:
///
/// * recognition prompts get the first label of the label statement;
/// * interpretation and speaker prompts get a templated sentence;
/// * subtopic requests get `Count` numbered subtopics for the scenario,
///   numbered after any already-listed ones;
/// * dialogue requests get a six-turn A/B dialogue cycling the target emotions.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubChat;

const FACETS: &[&str] = &[
    "an unexpected change of plans",
    "a long-awaited result",
    "a disagreement about priorities",
    "a small misunderstanding",
    "news from a friend",
    "a deadline that is getting close",
    "a first attempt at something new",
    "an old habit that is hard to break",
    "a decision nobody wants to make",
    "a surprising piece of feedback",
];

const DIALOGUE_LINES: &[&str] = &[
    "I keep thinking about {subtopic}.",
    "Really? What about it is on your mind?",
    "Mostly how it turned out, to be honest.",
    "I know what you mean, it caught me off guard too.",
    "Do you think we should talk to someone about {subtopic}?",
    "Maybe. Let's see how we both feel tomorrow.",
];

fn field<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix(':')))
        .map(str::trim)
}

fn target_speaker(prompt: &str) -> &str {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(markers::TARGET_PREFIX))
        .and_then(|l| l.split_once("] ").map(|(_, rest)| rest))
        .and_then(|rest| rest.split_once(':').map(|(s, _)| s))
        .unwrap_or("the speaker")
}

impl StubChat {
    fn answer(prompt: &str) -> String {
        let tag = format!("{:08x}", fnv1a(prompt.as_bytes()) >> 32);
        if let Some(labels) = section(prompt, markers::LABEL_STATEMENT) {
            return labels
                .lines()
                .find_map(|l| l.strip_prefix(markers::LIST_ITEM))
                .map(|l| l.trim().to_string())
                .unwrap_or_else(|| "unknown".into());
        }
        if let Some(task) = section(prompt, markers::INTERPRETATION_TASK) {
            let kind = if task.contains("implicit emotion") { "implicit" } else { "explicit" };
            let speaker = target_speaker(prompt);
            return format!(
                "The {kind} emotion of {speaker} in the target utterance follows the tone of the preceding turns (stub analysis {tag})."
            );
        }
        if let Some(task) = section(prompt, markers::SPEAKER_TASK) {
            let speaker = task
                .split_once("of the speaker ")
                .and_then(|(_, r)| r.split_once(" in this conversation"))
                .map(|(s, _)| s)
                .unwrap_or("The speaker");
            return format!("{speaker} speaks in a direct, engaged way and responds to the other participants (stub profile {tag}).");
        }
        if section(prompt, markers::SUBTOPIC_REQUEST).is_some() {
            let scenario = field(prompt, "Scenario").unwrap_or("general");
            let count: usize = field(prompt, "Count").and_then(|c| c.parse().ok()).unwrap_or(30);
            let offset = section(prompt, markers::ALREADY_LISTED)
                .map_or(0, |s| s.lines().filter(|l| l.starts_with(markers::LIST_ITEM)).count());
            return (offset..offset + count)
                .map(|i| format!("{scenario} {:02}: {}", i + 1, FACETS[i % FACETS.len()]))
                .collect::<Vec<_>>()
                .join("\n");
        }
        if section(prompt, markers::DIALOGUE_REQUEST).is_some() {
            let subtopic = field(prompt, "Subtopic").unwrap_or("this");
            let emotions: Vec<&str> = field(prompt, "Target emotions")
                .map(|e| e.split(',').map(str::trim).filter(|e| !e.is_empty()).collect())
                .unwrap_or_default();
            let emotions = if emotions.is_empty() { vec!["neutral"] } else { emotions };
            return DIALOGUE_LINES
                .iter()
                .enumerate()
                .map(|(i, line)| {
                    let speaker = if i % 2 == 0 { "A" } else { "B" };
                    let emotion = emotions[i % emotions.len()];
                    format!("{speaker} | {emotion} | {}", line.replace("{subtopic}", subtopic))
                })
                .collect::<Vec<_>>()
                .join("\n");
        }
        format!("stub response {tag}")
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl ChatBackend for StubChat {
    fn name(&self) -> &str {
        "stub"
    }

    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        let text = StubChat::answer(&req.user_text);
        Ok(Completion {
            usage: Usage {
                prompt_tokens: word_count(&req.user_text) + req.system_text.as_deref().map_or(0, word_count),
                completion_tokens: word_count(&text),
            },
            text,
        })
    }
}

/// Hashed token-frequency projection: each lowercase alphanumeric token
/// adds ±1 to one of `dim` buckets chosen by its FNV-1a hash.
#[derive(Debug, Clone, Copy)]
pub struct StubEmbedder {
    dim: usize,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        StubEmbedder { dim: DEFAULT_STUB_DIM }
    }
}

impl StubEmbedder {
    pub fn new(dim: usize) -> Self {
        StubEmbedder { dim: dim.max(1) }
    }

    pub fn vector(&self, text: &str) -> Vec<f32> {
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
        // Punctuation-only text still needs a nonzero vector.
        let fallback = format!("\u{0}{}", text.trim());
        if tokens.is_empty() {
            tokens.push(&fallback);
        }
        let mut v = vec![0f32; self.dim];
        for t in tokens {
            let h = fnv1a(t.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        v
    }
}

impl Embedder for StubEmbedder {
    fn id(&self) -> String {
        format!("stub-hash-{}", self.dim)
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        if texts.is_empty() {
            return Err(ClientError::EmptyInput);
        }
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}
