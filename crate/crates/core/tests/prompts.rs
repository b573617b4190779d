//! Golden snapshots of rendered prompts. Set UPDATE_SNAPSHOTS=1 to rewrite.

mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;

use erc_core::client::StubEmbedder;
use erc_core::corpus::history_window;
use erc_core::prompting::{
    assemble_recognition_prompt, build_interpretation_prompt, build_speaker_prompt, listed_labels, markers, section,
    ExternalKnowledge, InterpretationKind,
};
use erc_core::retrieval::{build_repository, Exclusion};

fn check_snapshot(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(name);
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_SNAPSHOTS=1", path.display()));
    assert_eq!(actual, expected, "snapshot {name} changed");
}

fn knowledge() -> ExternalKnowledge {
    ExternalKnowledge {
        speaker_traits: BTreeMap::from([
            ("Ann".to_string(), "Direct and quick to voice annoyance.".to_string()),
            ("Ben".to_string(), "Apologetic, eager to smooth things over.".to_string()),
        ]),
        explicit_interpretation: Some("Ann states her irritation openly.".into()),
        implicit_interpretation: Some("Ann feels let down and a little hurt.".into()),
    }
}

#[test]
fn recognition_prompt_snapshot() {
    let corpus = common::pipeline_fixture();
    let conv = corpus.conversation("dinner").unwrap();
    let embedder = StubEmbedder::new(32);
    let repo = build_repository(&[&corpus], &embedder, 8).unwrap();
    let exclusion: Exclusion = [(corpus.name.clone(), conv.id.clone())].into_iter().collect();
    let query = embedder.vector(&conv.utterances[6].text);
    let demos = repo.top_k(&query, 3, Some(&exclusion)).unwrap();
    let prompt = assemble_recognition_prompt(conv, 6, 5, &knowledge(), &demos, &corpus.label_set)
        .unwrap()
        .render();
    check_snapshot("recognition.txt", &prompt);
    assert_eq!(listed_labels(&prompt), corpus.label_set.iter().map(String::as_str).collect::<Vec<_>>());
    let history = section(&prompt, markers::HISTORY).unwrap();
    assert_eq!(history.lines().filter(|l| !l.trim().is_empty()).count(), 5);
    assert!(history.contains(">> [6] Ann: Thanks, that would be nice."));
}

#[test]
fn bare_recognition_prompt_snapshot() {
    let corpus = common::pipeline_fixture();
    let conv = corpus.conversation("exam").unwrap();
    let prompt = assemble_recognition_prompt(conv, 0, 5, &ExternalKnowledge::default(), &[], &corpus.label_set)
        .unwrap()
        .render();
    check_snapshot("recognition_bare.txt", &prompt);
    assert!(prompt.contains(markers::NO_DEMONSTRATIONS));
    assert!(prompt.contains(markers::NO_KNOWLEDGE));
}

#[test]
fn interpretation_prompt_snapshots() {
    let corpus = common::pipeline_fixture();
    let conv = corpus.conversation("dinner").unwrap();
    let history = history_window(conv, 4, 5).unwrap();
    let explicit = build_interpretation_prompt(history, &conv.utterances[4], InterpretationKind::Explicit).unwrap();
    let implicit = build_interpretation_prompt(history, &conv.utterances[4], InterpretationKind::Implicit).unwrap();
    check_snapshot("interpretation_explicit.txt", &explicit);
    check_snapshot("interpretation_implicit.txt", &implicit);

    // The two prompts differ only in the directive line.
    let (a, b): (Vec<_>, Vec<_>) = (explicit.lines().collect(), implicit.lines().collect());
    assert_eq!(a.len(), b.len());
    let differing: Vec<usize> = (0..a.len()).filter(|i| a[*i] != b[*i]).collect();
    assert_eq!(differing.len(), 1, "{differing:?}");
    let directive = section(&explicit, "### Interpretation Task").unwrap();
    assert!(directive.contains(a[differing[0]]));
    assert!(a[differing[0]].contains("explicit") && b[differing[0]].contains("implicit"));
}

#[test]
fn speaker_prompt_snapshot() {
    let corpus = common::pipeline_fixture();
    let conv = corpus.conversation("promotion").unwrap();
    check_snapshot("speaker.txt", &build_speaker_prompt(conv, "Dev").unwrap());
}
