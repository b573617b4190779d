use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use erc_annotation::AppState;
use erc_core::augmentation::{AugmentationController, ControllerState};
use erc_core::client::Embedder;
use erc_core::corpus::convert::{from_emorynlp_json, from_meld_csv, from_tsv};
use erc_core::corpus::{corpus_stats, load_corpus, save_corpus, Corpus, LabelSet, Split};
use erc_core::curriculum::{corpus_difficulty, emit_manifest, partition_buckets, write_manifest, DifficultyReport};
use erc_core::evaluation::{
    aggregate, read_prediction_log, recognition_prompt, reparse, run_experiment, score, write_prediction_log,
    write_prompt_log, write_report, Demonstrations, EvalError, PipelineConfig, SeedReport,
};
use erc_core::knowledge::{extract_corpus_knowledge, load_knowledge, save_knowledge, KnowledgeBase};
use erc_core::retrieval::{build_repository, load_repository, retrieve_top_k, save_repository, Exclusion, Repository, RetrievalError};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::*;

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    apply_flags(&cli.command, &mut cfg);
    if cli.verbose {
        eprintln!("{}", json!({ "resolved_config": cfg }));
    }
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Difficulty(a) => difficulty(a, &cfg),
        Command::Plan(a) => plan(a, &cfg),
        Command::BuildRepo(a) => build_repo(a, &cfg),
        Command::Retrieve(a) => retrieve(a, &mut cfg),
        Command::Knowledge(a) => knowledge(a, &cfg),
        Command::RenderPrompt(a) => render_prompt(a, &mut cfg),
        Command::Predict(a) => predict(a, &mut cfg),
        Command::Evaluate(a) => evaluate(a, &mut cfg),
        Command::Augment(AugmentCommand::Start(a)) => augment_start(a, &cfg),
        Command::Augment(AugmentCommand::Close(a)) => augment_close(a),
        Command::Augment(AugmentCommand::Status(a)) => augment_status(a),
        Command::ServeAnnotation(a) => serve_annotation(a),
    }
}

// ------------------------------------------------------------------ flags

fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn apply_wes(a: &WesArgs, cfg: &mut RunConfig) {
    if a.wheel.is_some() {
        cfg.wheel = a.wheel.clone();
    }
    set(&mut cfg.k, &a.k);
    set(&mut cfg.b, &a.b);
    set(&mut cfg.mode, &a.mode);
}

fn apply_embed(a: &EmbedArgs, cfg: &mut RunConfig) {
    set(&mut cfg.embedder, &a.embedder);
    set(&mut cfg.embed_model, &a.embed_model);
    if a.embed_dim.is_some() {
        cfg.embed_dim = a.embed_dim;
    }
}

fn apply_chat(a: &ChatArgs, cfg: &mut RunConfig) {
    set(&mut cfg.chat, &a.chat);
    set(&mut cfg.model_id, &a.model);
    set(&mut cfg.knowledge_model_id, &a.knowledge_model);
    if a.cache.is_some() {
        cfg.cache = a.cache.clone();
    }
}

fn apply_pipeline(a: &PipelineArgs, cfg: &mut RunConfig) {
    set(&mut cfg.window, &a.window);
    set(&mut cfg.retrieval_k, &a.retrieval_k);
    set(&mut cfg.workers, &a.workers);
    if a.include_own_dialogue {
        cfg.exclude_own_dialogue = false;
    }
    apply_embed(&a.embed, cfg);
}

fn apply_flags(command: &Command, cfg: &mut RunConfig) {
    match command {
        Command::Ingest(_) | Command::Augment(AugmentCommand::Close(_) | AugmentCommand::Status(_)) => {}
        Command::ServeAnnotation(_) => {}
        Command::Difficulty(a) => apply_wes(&a.wes, cfg),
        Command::Plan(a) => {
            apply_wes(&a.wes, cfg);
            set(&mut cfg.buckets, &a.buckets);
            set(&mut cfg.epochs, &a.epochs);
        }
        Command::BuildRepo(a) => apply_embed(&a.embed, cfg),
        Command::Retrieve(a) => {
            set(&mut cfg.retrieval_k, &a.k);
            apply_embed(&a.embed, cfg);
        }
        Command::Knowledge(a) => {
            set(&mut cfg.window, &a.window);
            apply_chat(&a.chat, cfg);
        }
        Command::RenderPrompt(a) => apply_pipeline(&a.pipeline, cfg),
        Command::Predict(a) => {
            apply_pipeline(&a.pipeline, cfg);
            apply_chat(&a.chat, cfg);
            if let Some(seed) = a.seed {
                cfg.seeds = vec![seed];
            }
        }
        Command::Evaluate(a) => {
            apply_pipeline(&a.pipeline, cfg);
            apply_chat(&a.chat, cfg);
            if let Some(seeds) = &a.seeds {
                cfg.seeds = seeds.0.clone();
            }
        }
        Command::Augment(AugmentCommand::Start(a)) => {
            if !a.targets.is_empty() {
                cfg.targets = a.targets.iter().copied().collect();
            }
            set(&mut cfg.chat, &a.chat);
            set(&mut cfg.generation.model_id, &a.model);
            set(&mut cfg.generation.max_dialogues_per_round, &a.max_dialogues);
            if a.cache.is_some() {
                cfg.cache = a.cache.clone();
            }
        }
    }
}

// ---------------------------------------------------------------- helpers

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value).map_err(CliError::data)?;
    writeln!(out).map_err(CliError::data)
}

fn write_jsonl<T: Serialize>(items: &[T], path: Option<&Path>) -> Result<()> {
    let mut out: Box<dyn Write> = match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(CliError::data)?;
        writeln!(out).map_err(CliError::data)?;
    }
    out.flush().map_err(CliError::data)
}

fn corpus(path: &Path) -> Result<Corpus> {
    load_corpus(path, None).map_err(CliError::data)
}

fn retrieval_error(e: RetrievalError) -> CliError {
    let upstream = matches!(e, RetrievalError::QueryEmbedding(_) | RetrievalError::Embedder { .. });
    CliError::classify(e, upstream)
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::Config(_) => CliError::usage(e),
        _ => {
            let upstream = e.is_upstream();
            CliError::classify(e, upstream)
        }
    }
}

fn difficulty_reports(path: &Path, cfg: &RunConfig) -> Result<Vec<DifficultyReport>> {
    let corpus = corpus(path)?;
    let wheel = cfg.wheel_for(&corpus.label_set)?;
    corpus_difficulty(&corpus, &wheel, &cfg.wes()?, cfg.mode).map_err(CliError::data)
}

/// Loads a repository and an embedder that matches it. A stub embedder
/// without an explicit dimension takes the repository's.
fn repository(path: &Path, cfg: &mut RunConfig) -> Result<(Repository, Box<dyn Embedder>)> {
    let repo = load_repository(path).map_err(retrieval_error)?;
    if cfg.embedder == crate::config::Backend::Stub && cfg.embed_dim.is_none() {
        cfg.embed_dim = Some(repo.embed_dim());
    }
    let embedder = cfg.embedder()?;
    if repo.embedder_id() != "unknown" && repo.embedder_id() != embedder.id() {
        return Err(CliError::data(format!(
            "repository {} was built with embedder {:?}, but the configured embedder is {:?}",
            path.display(),
            repo.embedder_id(),
            embedder.id()
        )));
    }
    Ok((repo, embedder))
}

fn knowledge_base(path: Option<&Path>) -> Result<Option<KnowledgeBase>> {
    path.map(|p| load_knowledge(p).map_err(CliError::data)).transpose()
}

fn pipeline(cfg: &RunConfig) -> Result<PipelineConfig> {
    let p = cfg.pipeline();
    p.validate().map_err(CliError::usage)?;
    Ok(p)
}

// ---------------------------------------------------------------- commands

fn ingest(a: IngestArgs) -> Result<()> {
    let name = a.name.clone().unwrap_or_else(|| {
        a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "corpus".into())
    });
    let split = a.split.unwrap_or(Split::None);
    let manifest = a.labels.as_deref().map(LabelSet::load).transpose().map_err(CliError::data)?;
    let open = || File::open(&a.input).map_err(|e| CliError::data(format!("{}: {e}", a.input.display())));
    let mut corpus = match a.format {
        InputFormat::Jsonl => {
            let mut c = load_corpus(&a.input, manifest.as_ref().map(|m| m.labels.as_slice())).map_err(CliError::data)?;
            if let Some(n) = &a.name {
                c.name = n.clone();
            }
            c.split = split;
            c
        }
        InputFormat::MeldCsv => from_meld_csv(BufReader::new(open()?), &name, split).map_err(CliError::data)?,
        InputFormat::Emorynlp => from_emorynlp_json(BufReader::new(open()?), &name, split).map_err(CliError::data)?,
        InputFormat::Tsv => from_tsv(BufReader::new(open()?), &name, split).map_err(CliError::data)?,
    };
    if let Some(m) = manifest {
        corpus = Corpus::new(corpus.name, corpus.split, m.labels, corpus.conversations).map_err(CliError::data)?;
    }
    save_corpus(&corpus, &a.out).map_err(CliError::data)?;
    print_json(&json!({
        "name": corpus.name,
        "split": corpus.split.to_string(),
        "labels": corpus.label_set,
        "stats": corpus_stats(&corpus),
    }))
}

fn difficulty(a: DifficultyArgs, cfg: &RunConfig) -> Result<()> {
    let reports = difficulty_reports(&a.corpus, cfg)?;
    write_jsonl(&reports, a.out.as_deref())
}

fn plan(a: PlanArgs, cfg: &RunConfig) -> Result<()> {
    let reports: Vec<DifficultyReport> = match (&a.corpus, &a.difficulty) {
        (Some(c), _) => difficulty_reports(c, cfg)?,
        (None, Some(d)) => {
            let raw = std::fs::read_to_string(d).map_err(|e| CliError::data(format!("{}: {e}", d.display())))?;
            raw.lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::data(format!("{} line {}: {e}", d.display(), i + 1))))
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(CliError::usage("plan needs --corpus or --difficulty")),
    };
    let plan = partition_buckets(&reports, cfg.buckets)
        .and_then(|p| p.schedule(cfg.epochs))
        .map_err(CliError::data)?;
    match &a.out {
        Some(path) => emit_manifest(&plan, path).map_err(CliError::data),
        None => write_manifest(&plan, &mut std::io::stdout().lock()).map_err(CliError::data),
    }
}

fn build_repo(a: BuildRepoArgs, cfg: &RunConfig) -> Result<()> {
    let corpora = a.corpus.iter().map(|p| corpus(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Corpus> = corpora.iter().collect();
    let embedder = cfg.embedder()?;
    let repo = build_repository(&refs, embedder.as_ref(), a.batch_size).map_err(retrieval_error)?;
    save_repository(&repo, &a.out).map_err(retrieval_error)?;
    let mut per_source: BTreeMap<&str, usize> = BTreeMap::new();
    for e in repo.entries() {
        *per_source.entry(e.source.as_str()).or_default() += 1;
    }
    print_json(&json!({
        "entries": repo.len(),
        "per_source": per_source,
        "embedder_id": repo.embedder_id(),
        "embed_dim": repo.embed_dim(),
    }))
}

fn retrieve(a: RetrieveArgs, cfg: &mut RunConfig) -> Result<()> {
    let (repo, embedder) = repository(&a.repo, cfg)?;
    let mut exclusion = Exclusion::new();
    for x in &a.exclude {
        let (source, dialogue) = x
            .split_once('/')
            .ok_or_else(|| CliError::usage(format!("--exclude expects source/dialogue_id, got {x:?}")))?;
        exclusion.insert((source.to_string(), dialogue.to_string()));
    }
    let results = match retrieve_top_k(&repo, &a.query, cfg.retrieval_k, Some(&exclusion), embedder.as_ref()) {
        Ok(r) => r,
        Err(RetrievalError::NoEligibleEntries) => Vec::new(),
        Err(RetrievalError::ZeroK) => return Err(CliError::usage("--k must be at least 1")),
        Err(e) => return Err(retrieval_error(e)),
    };
    let rows: Vec<_> = results
        .iter()
        .enumerate()
        .map(|(rank, r)| {
            json!({
                "rank": rank + 1,
                "score": r.score,
                "text": r.entry.text,
                "label": r.entry.label,
                "source": r.entry.source,
                "dialogue_id": r.entry.dialogue_id,
                "position": r.entry.position,
            })
        })
        .collect();
    write_jsonl(&rows, None)
}

fn knowledge(a: KnowledgeArgs, cfg: &RunConfig) -> Result<()> {
    if cfg.window == 0 {
        return Err(CliError::usage("window must be at least 1"));
    }
    let corpus = corpus(&a.corpus)?;
    let client = cfg.chat_client()?;
    let records = extract_corpus_knowledge(&client, &cfg.knowledge_model_id, &corpus, cfg.window).map_err(|e| {
        let upstream = e.is_upstream();
        CliError::classify(e, upstream)
    })?;
    save_knowledge(&records, &a.out).map_err(CliError::data)?;
    print_json(&json!({"records": records.len(), "out": a.out}))
}

fn render_prompt(a: RenderPromptArgs, cfg: &mut RunConfig) -> Result<()> {
    let corpus = corpus(&a.corpus)?;
    let conv = corpus
        .conversation(&a.dialogue)
        .ok_or_else(|| CliError::data(format!("no conversation {:?} in {}", a.dialogue, a.corpus.display())))?;
    let kb = knowledge_base(a.pipeline.knowledge.as_deref())?;
    let ek = kb
        .as_ref()
        .and_then(|kb| kb.get(&(conv.id.clone(), a.index)).cloned())
        .unwrap_or_default();
    let repo = a.pipeline.repo.as_deref().map(|p| repository(p, cfg)).transpose()?;
    let config = pipeline(cfg)?;
    let demos = repo.as_ref().map(|(repo, e)| Demonstrations { repo, embedder: e.as_ref() });
    let prompt = recognition_prompt(&corpus, conv, a.index, &config, demos.as_ref(), &ek)
        .map_err(|e| CliError::classify(&e, matches!(e, erc_core::evaluation::StageError::Retrieval(RetrievalError::QueryEmbedding(_)))))?;
    print!("{prompt}");
    if !prompt.ends_with('\n') {
        println!();
    }
    Ok(())
}

struct Inputs {
    knowledge: Option<KnowledgeBase>,
    repo: Option<(Repository, Box<dyn Embedder>)>,
}

impl Inputs {
    fn load(a: &PipelineArgs, cfg: &mut RunConfig) -> Result<Self> {
        Ok(Inputs {
            knowledge: knowledge_base(a.knowledge.as_deref())?,
            repo: a.repo.as_deref().map(|p| repository(p, cfg)).transpose()?,
        })
    }

    fn demos(&self) -> Option<Demonstrations<'_>> {
        self.repo.as_ref().map(|(repo, e)| Demonstrations { repo, embedder: e.as_ref() })
    }
}

fn predict(a: PredictArgs, cfg: &mut RunConfig) -> Result<()> {
    let corpus = corpus(&a.corpus)?;
    let inputs = Inputs::load(&a.pipeline, cfg)?;
    let config = pipeline(cfg)?;
    let client = cfg.chat_client()?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let out = erc_core::evaluation::predict_corpus(&corpus, &config, &client, inputs.demos().as_ref(), inputs.knowledge.as_ref(), seed)
        .map_err(eval_error)?;
    write_prediction_log(&out.predictions, &a.out).map_err(CliError::data)?;
    if let Some(p) = &a.prompts {
        write_prompt_log(&out.prompts, p).map_err(CliError::data)?;
    }
    let invalid = out.predictions.iter().filter(|p| p.parsed.is_none()).count();
    let report = score(&out.predictions, &corpus.label_set).ok();
    print_json(&json!({
        "seed": seed,
        "predictions": out.predictions.len(),
        "invalid": invalid,
        "report": report,
    }))
}

fn evaluation_corpus(path: &Path, split: Option<Split>) -> Result<Corpus> {
    let file: PathBuf = if path.is_dir() {
        let split = split.ok_or_else(|| CliError::usage("--split is required when --corpus is a directory"))?;
        path.join(format!("{split}.jsonl"))
    } else {
        path.to_path_buf()
    };
    let mut c = corpus(&file)?;
    if let Some(s) = split {
        c.split = s;
    }
    Ok(c)
}

fn evaluate(a: EvaluateArgs, cfg: &mut RunConfig) -> Result<()> {
    let corpus = evaluation_corpus(&a.corpus, a.split)?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
    }
    let report = if !a.predictions.is_empty() {
        let runs = a
            .predictions
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut preds = read_prediction_log(p).map_err(CliError::data)?;
                reparse(&mut preds, &corpus.label_set);
                let report = score(&preds, &corpus.label_set).map_err(CliError::data)?;
                Ok(SeedReport { seed: i as u64, report })
            })
            .collect::<Result<Vec<_>>>()?;
        aggregate(runs).map_err(CliError::data)?
    } else {
        if cfg.seeds.is_empty() {
            return Err(CliError::usage("no seeds configured"));
        }
        let inputs = Inputs::load(&a.pipeline, cfg)?;
        let config = pipeline(cfg)?;
        let client = cfg.chat_client()?;
        let (report, outputs) =
            run_experiment(&corpus, &config, &client, inputs.demos().as_ref(), inputs.knowledge.as_ref(), &cfg.seeds)
                .map_err(eval_error)?;
        if let Some(dir) = &a.out_dir {
            for o in &outputs {
                write_prediction_log(&o.predictions, &dir.join(format!("predictions-seed{}.jsonl", o.seed))).map_err(CliError::data)?;
                write_prompt_log(&o.prompts, &dir.join(format!("prompts-seed{}.jsonl", o.seed))).map_err(CliError::data)?;
            }
        }
        report
    };
    if let Some(dir) = &a.out_dir {
        write_report(&report, &dir.join("report.json")).map_err(CliError::data)?;
    }
    print_json(&report)
}

// ------------------------------------------------------------ augmentation

fn augment_error(e: erc_core::augmentation::AugmentError) -> CliError {
    let upstream = e.is_upstream();
    CliError::classify(e, upstream)
}

fn save_controller(c: &AugmentationController, path: &Path) -> Result<()> {
    c.save(path).map_err(|e| CliError::data(format!("saving {}: {e}", path.display())))
}

fn load_controller(path: &Path) -> Result<AugmentationController> {
    if !path.exists() {
        return Err(CliError::data(format!("state file {} does not exist; run `augment start` first", path.display())));
    }
    AugmentationController::load(path).map_err(augment_error)
}

fn augment_start(a: AugmentStartArgs, cfg: &RunConfig) -> Result<()> {
    let mut controller = if a.state.exists() {
        let c = load_controller(&a.state)?;
        if !cfg.targets.is_empty() && &cfg.targets != c.targets() {
            return Err(CliError::usage(format!(
                "targets are fixed once {} exists; it holds {:?}",
                a.state.display(),
                c.targets()
            )));
        }
        c
    } else {
        if cfg.targets.is_empty() {
            return Err(CliError::usage("a new augmentation state needs --target emotion=count or config targets"));
        }
        let base = a.base.as_deref().map(corpus).transpose()?;
        AugmentationController::new(cfg.targets.clone(), base.as_ref())
    };
    let client = cfg.chat_client()?;
    let round = controller.start_round(&client, &cfg.generation).map_err(augment_error)?.cloned();
    save_controller(&controller, &a.state)?;
    match round {
        Some(r) => print_json(&json!({"round": r, "pending": controller.store().pending_in_round(r.round_index)})),
        None => print_json(&json!({"round": null, "message": "round limit reached", "deficit": controller.deficit()})),
    }
}

fn augment_close(a: AugmentCloseArgs) -> Result<()> {
    let mut controller = load_controller(&a.state)?;
    let round = controller.close_round().map_err(augment_error)?.clone();
    save_controller(&controller, &a.state)?;
    if let Some(out) = &a.out {
        let corpus = controller.augmented_corpus().map_err(augment_error)?;
        save_corpus(&corpus, out).map_err(CliError::data)?;
    }
    print_json(&json!({"round": round, "deficit": controller.deficit()}))
}

fn augment_status(a: AugmentStatusArgs) -> Result<()> {
    let controller = load_controller(&a.state)?;
    let state: ControllerState = controller.state();
    print_json(&json!({
        "agreement": controller.agreement(),
        "rounds": state.rounds,
        "augmented_utterances": controller.augmented_corpus().map(|c| c.num_utterances()).unwrap_or(0),
    }))
}

fn serve_annotation(a: ServeArgs) -> Result<()> {
    let controller = load_controller(&a.state)?;
    let app = AppState::new(controller, Some(a.state.clone()));
    let runtime = tokio::runtime::Runtime::new().map_err(CliError::data)?;
    runtime
        .block_on(erc_annotation::serve(a.addr, app, a.static_dir))
        .map_err(|e| CliError::data(format!("serving on {}: {e}", a.addr)))
}
