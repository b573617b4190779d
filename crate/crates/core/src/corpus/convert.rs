//! Converters from upstream distribution formats into [`Corpus`].
//!
//! Only the layouts that ship as plain text are handled here: MELD's CSV
//! files, EmoryNLP's episode JSON, and a generic TSV export (one utterance
//! per row) which is how IEMOCAP transcripts are usually flattened.

use std::collections::HashMap;
use std::io::Read;

use serde::Deserialize;

use super::{normalize_label, Conversation, Corpus, CorpusError, Split, Utterance};

#[derive(Debug, Deserialize)]
struct MeldRow {
    #[serde(rename = "Utterance")]
    utterance: String,
    #[serde(rename = "Speaker")]
    speaker: String,
    #[serde(rename = "Emotion")]
    emotion: String,
    #[serde(rename = "Dialogue_ID")]
    dialogue_id: u64,
    #[serde(rename = "Utterance_ID")]
    utterance_id: u64,
}

/// MELD CSV (`Utterance,Speaker,Emotion,...,Dialogue_ID,Utterance_ID,...`).
/// Utterances are ordered by `Utterance_ID` and re-indexed from 0.
pub fn from_meld_csv<R: Read>(reader: R, name: &str, split: Split) -> Result<Corpus, CorpusError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows: Vec<MeldRow> = Vec::new();
    for row in rdr.deserialize() {
        rows.push(row.map_err(|e| CorpusError::Convert(e.to_string()))?);
    }
    let mut order: Vec<u64> = Vec::new();
    let mut groups: HashMap<u64, Vec<MeldRow>> = HashMap::new();
    for row in rows {
        let id = row.dialogue_id;
        if !groups.contains_key(&id) {
            order.push(id);
        }
        groups.entry(id).or_default().push(row);
    }
    let mut conversations = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| r.utterance_id);
        let utterances = rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| Utterance::new(i, r.speaker.trim(), r.utterance.trim(), Some(&r.emotion)))
            .collect();
        conversations.push(Conversation::new(id.to_string(), utterances)?);
    }
    finish(name, split, conversations)
}

#[derive(Debug, Deserialize)]
struct EmoryFile {
    episodes: Vec<EmoryEpisode>,
}

#[derive(Debug, Deserialize)]
struct EmoryEpisode {
    scenes: Vec<EmoryScene>,
}

#[derive(Debug, Deserialize)]
struct EmoryScene {
    scene_id: String,
    utterances: Vec<EmoryUtterance>,
}

#[derive(Debug, Deserialize)]
struct EmoryUtterance {
    speakers: Vec<String>,
    transcript: String,
    emotion: String,
}

/// EmoryNLP JSON: one conversation per scene. Multi-speaker turns are
/// attributed to the joined speaker list.
pub fn from_emorynlp_json<R: Read>(reader: R, name: &str, split: Split) -> Result<Corpus, CorpusError> {
    let file: EmoryFile = serde_json::from_reader(reader).map_err(|e| CorpusError::Convert(e.to_string()))?;
    let mut conversations = Vec::new();
    for scene in file.episodes.into_iter().flat_map(|e| e.scenes) {
        let utterances: Vec<Utterance> = scene
            .utterances
            .into_iter()
            .filter(|u| !u.transcript.trim().is_empty())
            .enumerate()
            .map(|(i, u)| Utterance::new(i, u.speakers.join(" & "), u.transcript.trim(), Some(&u.emotion)))
            .collect();
        if utterances.is_empty() {
            continue;
        }
        conversations.push(Conversation::new(scene.scene_id, utterances)?);
    }
    finish(name, split, conversations)
}

#[derive(Debug, Deserialize)]
struct TsvRow {
    dialogue_id: String,
    index: usize,
    speaker: String,
    text: String,
    #[serde(default)]
    label: Option<String>,
}

/// Tab-separated rows with header `dialogue_id  index  speaker  text  label`.
/// Rows of one dialogue must be adjacent.
pub fn from_tsv<R: Read>(reader: R, name: &str, split: Split) -> Result<Corpus, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(reader);
    let mut conversations: Vec<Conversation> = Vec::new();
    let mut current: Option<(String, Vec<Utterance>)> = None;
    for row in rdr.deserialize() {
        let row: TsvRow = row.map_err(|e| CorpusError::Convert(e.to_string()))?;
        let label = row.label.as_deref().filter(|l| !l.trim().is_empty());
        let utt = Utterance::new(row.index, row.speaker, row.text, label);
        match &mut current {
            Some((id, utts)) if *id == row.dialogue_id => utts.push(utt),
            _ => {
                if let Some((id, utts)) = current.take() {
                    conversations.push(Conversation::new(id, utts)?);
                }
                current = Some((row.dialogue_id, vec![utt]));
            }
        }
    }
    if let Some((id, utts)) = current {
        conversations.push(Conversation::new(id, utts)?);
    }
    finish(name, split, conversations)
}

fn finish(name: &str, split: Split, conversations: Vec<Conversation>) -> Result<Corpus, CorpusError> {
    let mut labels: Vec<String> = Vec::new();
    for u in conversations.iter().flat_map(|c| &c.utterances) {
        if let Some(l) = &u.label {
            if !labels.contains(l) {
                labels.push(l.clone());
            }
        }
    }
    Corpus::new(normalize_label(name), split, labels, conversations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meld_rows_grouped_and_reindexed() {
        let csv = "Sr No.,Utterance,Speaker,Emotion,Sentiment,Dialogue_ID,Utterance_ID,Season,Episode,StartTime,EndTime\n\
1,Oh my God!,Monica,Surprise,positive,0,1,3,19,00:14:38,00:14:40\n\
2,What?,Joey,neutral,neutral,0,0,3,19,00:14:36,00:14:38\n\
3,\"Hey, you.\",Ross,Joy,positive,1,0,3,20,00:01:00,00:01:02\n";
        let c = from_meld_csv(csv.as_bytes(), "MELD", Split::Test).unwrap();
        assert_eq!(c.name, "meld");
        assert_eq!(c.conversations.len(), 2);
        let first = &c.conversations[0];
        assert_eq!(first.id, "0");
        assert_eq!(first.utterances[0].text, "What?");
        assert_eq!(first.utterances[1].label.as_deref(), Some("surprise"));
        assert_eq!(c.conversations[1].utterances[0].text, "Hey, you.");
    }

    #[test]
    fn emorynlp_scenes() {
        let json = r#"{"season_id": "s01", "episodes": [{"episode_id": "s01_e01", "scenes": [
            {"scene_id": "s01_e01_c01", "utterances": [
                {"utterance_id": "u1", "speakers": ["Monica Geller"], "transcript": "There's nothing to tell!", "emotion": "Neutral"},
                {"utterance_id": "u2", "speakers": ["Joey Tribbiani"], "transcript": "C'mon, you're going out with the guy!", "emotion": "Joyful"}
            ]}]}]}"#;
        let c = from_emorynlp_json(json.as_bytes(), "emorynlp", Split::Train).unwrap();
        assert_eq!(c.conversations.len(), 1);
        assert_eq!(c.label_set, vec!["neutral".to_string(), "joyful".to_string()]);
    }

    #[test]
    fn tsv_groups_adjacent_rows() {
        let tsv = "dialogue_id\tindex\tspeaker\ttext\tlabel\n\
Ses01F_impro01\t0\tF\tExcuse me.\tneu\n\
Ses01F_impro01\t1\tM\tDo you have your forms?\tfru\n\
Ses01F_impro02\t0\tF\tHi.\t\n";
        let c = from_tsv(tsv.as_bytes(), "iemocap", Split::Train).unwrap();
        assert_eq!(c.conversations.len(), 2);
        assert_eq!(c.conversations[1].utterances[0].label, None);
        assert_eq!(c.num_utterances(), 3);
    }
}
