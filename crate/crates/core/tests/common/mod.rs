//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance runner. Nothing here calls into the
//! code under test except to build inputs.

#![allow(dead_code)]

use std::collections::BTreeMap;

use erc_core::corpus::{Conversation, Corpus, Split, Utterance};
use rand::seq::SliceRandom;
use rand::Rng;

// ---------------------------------------------------------------- geometry

/// Similarity evaluated from explicit unit vectors. The branch comes from
/// the vector dot product; the value is the cosine of the absolute angle
/// difference.
pub fn oracle_similarity(angles: &BTreeMap<String, f64>, a: &str, b: &str) -> f64 {
    let (ta, tb) = (angles[a], angles[b]);
    let va = [ta.to_radians().cos(), ta.to_radians().sin()];
    let vb = [tb.to_radians().cos(), tb.to_radians().sin()];
    let dot = va[0] * vb[0] + va[1] * vb[1];
    if dot.abs() <= 1e-9 {
        1.0 / angles.len() as f64
    } else if dot < 0.0 {
        0.0
    } else {
        let cos = (ta - tb).abs().to_radians().cos();
        if cos > 0.0 {
            cos
        } else {
            0.0
        }
    }
}

/// Which branch the vector dot product selects: 0 orthogonal, 1 positive,
/// -1 negative.
pub fn oracle_branch(angles: &BTreeMap<String, f64>, a: &str, b: &str) -> i8 {
    let (ta, tb) = (angles[a].to_radians(), angles[b].to_radians());
    let dot = ta.cos() * tb.cos() + ta.sin() * tb.sin();
    if dot.abs() <= 1e-9 {
        0
    } else if dot > 0.0 {
        1
    } else {
        -1
    }
}

/// 2..=max_labels labels at random angles; some wheels get exact
/// orthogonal or antipodal pairs.
pub fn random_wheel(rng: &mut impl Rng, max_labels: usize) -> BTreeMap<String, f64> {
    let n = rng.random_range(2..=max_labels);
    let mut angles = BTreeMap::new();
    let special = rng.random_range(0..4);
    while angles.len() < n {
        let i = angles.len();
        let a = match (special, i) {
            (1, 1) => (angles["e0"] + 90.0f64) % 360.0,
            (2, 1) => (angles["e0"] + 180.0f64) % 360.0,
            (3, _) => rng.random_range(0..360) as f64,
            _ => rng.random_range(0.0..360.0),
        };
        angles.insert(format!("e{i}"), a);
    }
    angles
}

// -------------------------------------------------------------- difficulty

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDifficulty {
    pub wes_same: f64,
    pub wes_diff: f64,
    pub n_sp: usize,
    pub dif: f64,
}

/// Brute-force difficulty over `(speaker, label)` turns. Same-speaker
/// shifts are found by scanning every ordered pair `i < j` of one speaker's
/// turns with no turn of that speaker in between.
pub fn oracle_difficulty(
    turns: &[(String, String)],
    angles: &BTreeMap<String, f64>,
    k: f64,
    b: f64,
    always: bool,
) -> OracleDifficulty {
    let n = turns.len();
    let mut wes_same = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            if turns[i].0 != turns[j].0 {
                continue;
            }
            let adjacent = (i + 1..j).all(|m| turns[m].0 != turns[i].0);
            if adjacent && turns[i].1 != turns[j].1 {
                wes_same += k * oracle_similarity(angles, &turns[i].1, &turns[j].1) + b;
            }
        }
    }
    let mut wes_diff = 0.0;
    for i in 1..n {
        let (p, q) = (&turns[i - 1], &turns[i]);
        if p.0 != q.0 && (always || p.1 != q.1) {
            wes_diff += k * oracle_similarity(angles, &p.1, &q.1) + b;
        }
    }
    let mut speakers: Vec<&String> = turns.iter().map(|t| &t.0).collect();
    speakers.sort();
    speakers.dedup();
    let n_sp = speakers.len();
    OracleDifficulty {
        wes_same,
        wes_diff,
        n_sp,
        dif: (wes_same + wes_diff + n_sp as f64) / (n + n_sp) as f64,
    }
}

pub fn random_turns(rng: &mut impl Rng, labels: &[String], max_len: usize, max_speakers: usize) -> Vec<(String, String)> {
    let len = rng.random_range(1..=max_len);
    let speakers = rng.random_range(1..=max_speakers);
    (0..len)
        .map(|_| {
            (
                format!("S{}", rng.random_range(0..speakers)),
                labels[rng.random_range(0..labels.len())].clone(),
            )
        })
        .collect()
}

pub fn conversation_from_turns(id: &str, turns: &[(String, String)]) -> Conversation {
    let us = turns
        .iter()
        .enumerate()
        .map(|(i, (s, l))| Utterance::new(i, s.clone(), format!("turn {i}"), Some(l)))
        .collect();
    Conversation::new(id, us).expect("valid conversation")
}

// ----------------------------------------------------------------- metrics

/// `(precision, recall, f1, support)` for one class.
pub type ClassRow = (f64, f64, f64, usize);

/// Weighted F1 and accuracy computed class by class with full rescans.
/// `None` predictions are invalid.
pub fn naive_scores(gold: &[usize], pred: &[Option<usize>], classes: usize) -> (f64, f64, Vec<ClassRow>) {
    let n = gold.len();
    let correct = (0..n).filter(|&i| pred[i] == Some(gold[i])).count();
    let mut per = Vec::new();
    let mut wf1 = 0.0;
    for c in 0..classes {
        let tp = (0..n).filter(|&i| gold[i] == c && pred[i] == Some(c)).count() as f64;
        let fp = (0..n).filter(|&i| gold[i] != c && pred[i] == Some(c)).count() as f64;
        let fneg = (0..n).filter(|&i| gold[i] == c && pred[i] != Some(c)).count() as f64;
        let support = (0..n).filter(|&i| gold[i] == c).count();
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        wf1 += f * support as f64 / n as f64;
        per.push((p, r, f, support));
    }
    (correct as f64 / n as f64, wf1, per)
}

// --------------------------------------------------------------- retrieval

/// Score every entry, drop excluded ones, sort fully, keep `k`.
pub fn exhaustive_top_k(vectors: &[Vec<f32>], excluded: &[bool], query: &[f32], k: usize) -> Vec<(usize, f64)> {
    let to64 = |v: &[f32]| v.iter().map(|x| *x as f64).collect::<Vec<_>>();
    let q = to64(query);
    let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(usize, f64)> = vectors
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded[*i])
        .map(|(i, v)| {
            let e = to64(v);
            let dot: f64 = q.iter().zip(&e).map(|(a, b)| a * b).sum();
            let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            (i, (dot / (qn * en)).clamp(-1.0, 1.0))
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Vectors on a coarse integer grid so that exact ties are common.
pub fn grid_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-2..=2) as f32).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

// ---------------------------------------------------------- augmentation

pub const AUGMENTED_EMOTIONS: [&str; 5] = ["happiness", "neutral", "fear", "sadness", "anger"];

/// Reference domain by emotion counts for the augmented dataset, with their
/// row and column totals.
pub const AUGMENTED_TABLE: [(&str, [usize; 5], usize); 7] = [
    ("healthcare", [171, 421, 345, 381, 307], 1625),
    ("workplace", [155, 550, 398, 459, 300], 1862),
    ("education", [486, 324, 245, 276, 406], 1737),
    ("family", [147, 562, 392, 451, 463], 2015),
    ("social", [518, 341, 320, 312, 297], 1788),
    ("entertainment", [613, 332, 281, 267, 175], 1668),
    ("comprehensive", [623, 779, 642, 652, 618], 3314),
];
pub const AUGMENTED_COLUMN_TOTALS: [usize; 5] = [2713, 3309, 2623, 2798, 2566];
pub const AUGMENTED_TOTAL: usize = 14_009;

/// An augmented-format corpus whose domain by emotion counts equal the
/// table. Each domain's labels are shuffled and cut into two-speaker
/// dialogues of six turns (the last one shorter).
pub fn augmented_fixture_corpus(rng: &mut impl Rng) -> Corpus {
    let mut conversations = Vec::new();
    for (domain, cells, _) in AUGMENTED_TABLE {
        let mut labels: Vec<&str> = cells
            .iter()
            .zip(AUGMENTED_EMOTIONS)
            .flat_map(|(n, e)| std::iter::repeat_n(e, *n))
            .collect();
        labels.shuffle(rng);
        for (d, chunk) in labels.chunks(6).enumerate() {
            let us = chunk
                .iter()
                .enumerate()
                .map(|(i, l)| Utterance::new(i, if i % 2 == 0 { "A" } else { "B" }, format!("{domain} {d} turn {i}"), Some(l)))
                .collect();
            conversations.push(
                Conversation::new(format!("{domain}-{d:04}"), us)
                    .unwrap()
                    .with_domain(domain),
            );
        }
    }
    let labels = AUGMENTED_EMOTIONS.iter().map(|s| s.to_string()).collect();
    Corpus::new("augmented", Split::None, labels, conversations).unwrap()
}

// ------------------------------------------------------------- fixtures

/// Three short labeled conversations used by the end-to-end checks.
pub fn pipeline_fixture() -> Corpus {
    type Turn<'a> = (&'a str, &'a str, &'a str);
    let raw: [(&str, &[Turn]); 3] = [
        (
            "dinner",
            &[
                ("Ann", "You're late again.", "angry"),
                ("Ben", "Sorry, the bus broke down.", "sad"),
                ("Ann", "You could have called.", "frustrated"),
                ("Ben", "My phone died, I really am sorry.", "sad"),
                ("Ann", "Fine. The food is cold now.", "frustrated"),
                ("Ben", "I'll warm it up for us.", "neutral"),
                ("Ann", "Thanks, that would be nice.", "happy"),
            ],
        ),
        (
            "promotion",
            &[
                ("Cara", "I got the promotion!", "excited"),
                ("Dev", "No way, that's amazing!", "excited"),
                ("Cara", "I start next Monday.", "happy"),
                ("Dev", "We should celebrate tonight.", "happy"),
            ],
        ),
        (
            "exam",
            &[
                ("Eli", "The results are out.", "neutral"),
                ("Fay", "And? How did you do?", "neutral"),
                ("Eli", "I failed chemistry.", "sad"),
                ("Fay", "Oh no. You studied so hard.", "sad"),
                ("Eli", "It's so unfair!", "angry"),
            ],
        ),
    ];
    let conversations = raw
        .iter()
        .map(|(id, turns)| {
            let us = turns
                .iter()
                .enumerate()
                .map(|(i, (s, t, l))| Utterance::new(i, *s, *t, Some(l)))
                .collect();
            Conversation::new(*id, us).unwrap()
        })
        .collect();
    let labels = ["happy", "sad", "neutral", "angry", "excited", "frustrated"]
        .map(String::from)
        .to_vec();
    Corpus::new("iemocap", Split::Train, labels, conversations).unwrap()
}
