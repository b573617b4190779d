use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CORPUS: &str = r#"{"dialogue_id":"dinner","dataset":"iemocap","utterances":[{"index":0,"speaker":"Ann","text":"You're late again.","label":"angry"},{"index":1,"speaker":"Ben","text":"Sorry, the bus broke down.","label":"sad"},{"index":2,"speaker":"Ann","text":"You could have called.","label":"frustrated"},{"index":3,"speaker":"Ben","text":"I'll warm it up for us.","label":"neutral"}]}
{"dialogue_id":"promotion","dataset":"iemocap","utterances":[{"index":0,"speaker":"Cara","text":"I got the promotion!","label":"excited"},{"index":1,"speaker":"Dev","text":"No way, that's amazing!","label":"excited"},{"index":2,"speaker":"Cara","text":"I start next Monday.","label":"happy"}]}
{"dialogue_id":"exam","dataset":"iemocap","utterances":[{"index":0,"speaker":"Eli","text":"The results are out.","label":"neutral"},{"index":1,"speaker":"Fay","text":"And? How did you do?","label":"neutral"},{"index":2,"speaker":"Eli","text":"I failed chemistry.","label":"sad"},{"index":3,"speaker":"Fay","text":"Oh no. You studied so hard.","label":"sad"},{"index":4,"speaker":"Eli","text":"It's so unfair!","label":"angry"}]}
{"dialogue_id":"quiet","dataset":"iemocap","utterances":[{"index":0,"speaker":"Gil","text":"Morning.","label":"neutral"},{"index":1,"speaker":"Gil","text":"Coffee is ready.","label":"neutral"}]}
"#;

fn erc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erc"))
        .current_dir(dir)
        .env_remove("PRC_EMO_API_BASE")
        .env_remove("PRC_EMO_API_KEY")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = erc(dir, args);
    assert!(
        out.status.success(),
        "erc {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_error(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with("{\"error\"")).unwrap_or_else(|| panic!("no JSON error in {text}"));
    serde_json::from_str(line).unwrap()
}

fn resolved_config(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().find(|l| l.starts_with("{\"resolved_config\"")).expect("resolved config echoed");
    serde_json::from_str::<Value>(line).unwrap()["resolved_config"].clone()
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    std::fs::write(&path, CORPUS).unwrap();
    (dir, path)
}

fn lines(s: &str) -> Vec<Value> {
    s.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn no_subcommand_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = erc(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = erc(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["error"]["kind"], "usage");
}

#[test]
fn plan_writes_one_record_per_epoch() {
    let (dir, corpus) = workspace();
    let d = dir.path();
    ok(d, &["plan", "--corpus", corpus.to_str().unwrap(), "--buckets", "2", "--epochs", "4", "--out", "m.jsonl"]);
    let records = lines(&std::fs::read_to_string(d.join("m.jsonl")).unwrap());
    assert_eq!(records.len(), 4);
    let sizes: Vec<usize> = records.iter().map(|r| r["conversations"].as_array().unwrap().len()).collect();
    assert_eq!(sizes, [2, 4, 4, 4]);
    assert_eq!(records[0]["epoch"], 1);
    // The easiest bucket holds the no-shift dialogue.
    assert!(records[0]["conversations"].as_array().unwrap().contains(&Value::from("quiet")));

    // Same plan from precomputed reports, on stdout.
    ok(d, &["difficulty", "--corpus", "train.jsonl", "--out", "dif.jsonl"]);
    let stdout = ok(d, &["plan", "--difficulty", "dif.jsonl"]);
    assert_eq!(lines(&stdout), records);
}

#[test]
fn difficulty_flags_change_scores() {
    let (dir, _) = workspace();
    let d = dir.path();
    let base = lines(&ok(d, &["difficulty", "--corpus", "train.jsonl"]));
    let flat = lines(&ok(d, &["difficulty", "--corpus", "train.jsonl", "--k", "0", "--b", "0"]));
    assert_eq!(base.len(), 4);
    for r in &flat {
        let floor = r["n_sp"].as_f64().unwrap() / (r["n_u"].as_f64().unwrap() + r["n_sp"].as_f64().unwrap());
        assert!((r["dif"].as_f64().unwrap() - floor).abs() < 1e-12);
    }
    assert!(base.iter().zip(&flat).any(|(a, b)| a["dif"] != b["dif"]));
    let always = lines(&ok(d, &["difficulty", "--corpus", "train.jsonl", "--mode", "always"]));
    assert!(always.iter().zip(&base).all(|(a, b)| a["dif"].as_f64() >= b["dif"].as_f64()));
}

#[test]
fn retrieve_returns_k_results() {
    let (dir, _) = workspace();
    let d = dir.path();
    let summary: Value = serde_json::from_str(&ok(d, &["build-repo", "--corpus", "train.jsonl", "--out", "r.jsonl"])).unwrap();
    assert_eq!(summary["entries"], 14);
    let results = lines(&ok(d, &["retrieve", "--repo", "r.jsonl", "--query", "I am fine", "--k", "3"]));
    assert_eq!(results.len(), 3);
    let scores: Vec<f64> = results.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(results[0]["rank"], 1);

    let excluded = lines(&ok(
        d,
        &["retrieve", "--repo", "r.jsonl", "--query", "I am fine", "--k", "20", "--exclude", "iemocap/dinner"],
    ));
    assert_eq!(excluded.len(), 10);
    assert!(excluded.iter().all(|r| r["dialogue_id"] != "dinner"));

    let out = erc(d, &["retrieve", "--repo", "r.jsonl", "--query", "x", "--embed-dim", "8"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_error(&out)["error"]["message"].as_str().unwrap().contains("embedder"));
}

#[test]
fn flag_beats_file_beats_default() {
    let (dir, _) = workspace();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), r#"{"window": 3, "buckets": 3, "k": 0.5}"#).unwrap();
    let out = erc(d, &["--verbose", "--config", "cfg.json", "plan", "--corpus", "train.jsonl", "--buckets", "2"]);
    assert!(out.status.success());
    let cfg = resolved_config(&out);
    assert_eq!(cfg["buckets"], 2);
    assert_eq!(cfg["window"], 3);
    assert_eq!(cfg["k"], 0.5);
    assert_eq!(cfg["epochs"], 4);
    assert_eq!(cfg["b"], 1.0);

    let defaults = resolved_config(&erc(d, &["difficulty", "--corpus", "train.jsonl", "-v"]));
    assert_eq!((defaults["window"].as_u64(), defaults["buckets"].as_u64(), defaults["epochs"].as_u64()), (Some(5), Some(2), Some(4)));
    assert_eq!(defaults["mode"], "shift_required");

    std::fs::write(d.join("bad.json"), r#"{"windw": 3}"#).unwrap();
    let out = erc(d, &["--config", "bad.json", "difficulty", "--corpus", "train.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_by_error_class() {
    let (dir, _) = workspace();
    let d = dir.path();
    let out = erc(d, &["difficulty", "--corpus", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_error(&out)["error"]["code"], 3);

    std::fs::write(d.join("broken.jsonl"), "{not json}\n").unwrap();
    let out = erc(d, &["difficulty", "--corpus", "broken.jsonl"]);
    assert_eq!(out.status.code(), Some(3));

    let out = erc(d, &["plan", "--corpus", "train.jsonl", "--buckets", "9"]);
    assert_eq!(out.status.code(), Some(3));

    // HTTP backend without an endpoint configured.
    let out = erc(d, &["knowledge", "--corpus", "train.jsonl", "--chat", "http", "--out", "k.jsonl"]);
    assert_eq!(out.status.code(), Some(2));

}

#[test]
fn unreachable_service_is_upstream_error() {
    let (dir, _) = workspace();
    let d = dir.path();
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let out = Command::new(env!("CARGO_BIN_EXE_erc"))
        .current_dir(d)
        .env("PRC_EMO_API_BASE", format!("http://{addr}/v1"))
        .args(["knowledge", "--corpus", "train.jsonl", "--chat", "http", "--out", "k.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stderr_error(&out)["error"]["kind"], "upstream");
}

#[test]
fn offline_pipeline_is_deterministic() {
    let run = || {
        let (dir, _) = workspace();
        let d = dir.path();
        ok(d, &["build-repo", "--corpus", "train.jsonl", "--out", "repo.jsonl"]);
        ok(d, &["knowledge", "--corpus", "train.jsonl", "--out", "kb.jsonl", "--cache", "cache.jsonl"]);
        let prompt = ok(
            d,
            &["render-prompt", "--corpus", "train.jsonl", "--dialogue", "exam", "--index", "4", "--knowledge", "kb.jsonl", "--repo", "repo.jsonl"],
        );
        let predict: Value = serde_json::from_str(&ok(
            d,
            &["predict", "--corpus", "train.jsonl", "--knowledge", "kb.jsonl", "--repo", "repo.jsonl", "--out", "p.jsonl", "--prompts", "pr.jsonl"],
        ))
        .unwrap();
        let report = ok(
            d,
            &["evaluate", "--corpus", d.to_str().unwrap(), "--split", "train", "--seeds", "2", "--knowledge", "kb.jsonl", "--repo", "repo.jsonl", "--out-dir", "eval"],
        );
        let files: Vec<Vec<u8>> = ["repo.jsonl", "kb.jsonl", "p.jsonl", "pr.jsonl", "eval/report.json", "eval/predictions-seed1.jsonl"]
            .iter()
            .map(|f| std::fs::read(d.join(f)).unwrap())
            .collect();
        (prompt, predict, report, files, dir)
    };
    let (prompt, predict, report, files, dir) = run();
    let again = run();
    assert_eq!(prompt, again.0);
    assert_eq!(predict, again.1);
    assert_eq!(report, again.2);
    assert_eq!(files, again.3);

    assert!(prompt.contains(">> [4] Eli: It's so unfair!"));
    assert!(prompt.contains("### Demonstration Retrieval"));
    assert!(!prompt.contains("(no demonstrations retrieved)"));
    assert!(!prompt.contains("(no external knowledge)"));
    assert_eq!(predict["predictions"], 14);
    let report: Value = serde_json::from_str(&report).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    let mean = report["mean_weighted_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));

    // Rescoring the saved logs reproduces the report.
    let d = dir.path();
    let rescored: Value = serde_json::from_str(&ok(
        d,
        &[
            "evaluate",
            "--corpus",
            "train.jsonl",
            "--predictions",
            "eval/predictions-seed0.jsonl",
            "--predictions",
            "eval/predictions-seed1.jsonl",
        ],
    ))
    .unwrap();
    assert_eq!(rescored["mean_weighted_f1"], report["mean_weighted_f1"]);
    assert_eq!(rescored["mean_accuracy"], report["mean_accuracy"]);
}

#[test]
fn ingest_converts_tsv_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("x.tsv"),
        "dialogue_id\tindex\tspeaker\ttext\tlabel\nd1\t0\tA\tHello there\tneutral\nd1\t1\tB\tGo away!\tangry\n",
    )
    .unwrap();
    std::fs::write(d.join("labels.json"), r#"{"name": "tiny", "labels": ["angry", "neutral", "sad"]}"#).unwrap();
    let stats: Value = serde_json::from_str(&ok(
        d,
        &["ingest", "--input", "x.tsv", "--format", "tsv", "--name", "tiny", "--split", "test", "--labels", "labels.json", "--out", "t.jsonl"],
    ))
    .unwrap();
    assert_eq!(stats["labels"], serde_json::json!(["angry", "neutral", "sad"]));
    assert_eq!(stats["split"], "test");
    assert_eq!(stats["stats"]["utterances"], 2);
    let written = std::fs::read_to_string(d.join("t.jsonl")).unwrap();
    assert!(written.contains("\"dataset\":\"tiny\""));

    std::fs::write(d.join("small.json"), r#"{"name": "tiny", "labels": ["sad"]}"#).unwrap();
    let out = erc(d, &["ingest", "--input", "x.tsv", "--format", "tsv", "--labels", "small.json", "--out", "u.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn augmentation_round_trip_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = erc(d, &["augment", "start", "--state", "s.json"]);
    assert_eq!(out.status.code(), Some(2));

    let started: Value = serde_json::from_str(&ok(
        d,
        &["augment", "start", "--state", "s.json", "--target", "fear=4", "--target", "anger=2", "--max-dialogues", "3"],
    ))
    .unwrap();
    assert_eq!(started["round"]["round_index"], 1);
    let pending = started["pending"].as_u64().unwrap();
    assert!(pending > 0);
    for s in started["round"]["scenarios"].as_array().unwrap() {
        let targets = s["emotion_targets"].as_array().unwrap();
        assert!(targets.contains(&Value::from("fear")) && targets.contains(&Value::from("anger")));
    }

    // Closing with pending samples is refused; the state is untouched.
    let out = erc(d, &["augment", "close", "--state", "s.json"]);
    assert_eq!(out.status.code(), Some(3));
    let status: Value = serde_json::from_str(&ok(d, &["augment", "status", "--state", "s.json"])).unwrap();
    assert_eq!(status["agreement"]["round"], 1);
    assert_eq!(status["agreement"]["round_open"], true);
    assert!(!status.to_string().contains("original_label"));

    let out = erc(d, &["augment", "start", "--state", "s.json", "--target", "fear=9"]);
    assert_eq!(out.status.code(), Some(2));
    let out = erc(d, &["augment", "status", "--state", "nope.json"]);
    assert_eq!(out.status.code(), Some(3));
    let out = erc(d, &["serve-annotation", "--state", "nope.json"]);
    assert_eq!(out.status.code(), Some(3));
}
