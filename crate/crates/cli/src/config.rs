use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use erc_core::augmentation::{BasicEmotion, GenerationConfig};
use erc_core::client::{
    ApiEndpoint, ChatClient, Embedder, HttpChat, HttpEmbedder, ResponseCache, StubEmbedder, DEFAULT_STUB_DIM,
};
use erc_core::curriculum::DiffSpeakerMode;
use erc_core::emotion::{EmotionWheel, WesParams};
use erc_core::evaluation::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Stub,
    Http,
}

/// Settings shared by every subcommand. Resolved as flag, then `--config`
/// file, then these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Wheel JSON; without it labels are placed on the built-in circumplex.
    pub wheel: Option<PathBuf>,
    pub k: f64,
    pub b: f64,
    pub mode: DiffSpeakerMode,
    pub buckets: usize,
    pub epochs: usize,
    pub window: usize,
    pub retrieval_k: usize,
    pub embedder: Backend,
    pub embed_model: String,
    pub embed_dim: Option<usize>,
    pub chat: Backend,
    pub model_id: String,
    pub knowledge_model_id: String,
    pub cache: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub exclude_own_dialogue: bool,
    pub targets: BTreeMap<BasicEmotion, usize>,
    pub generation: GenerationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            wheel: None,
            k: 1.0,
            b: 1.0,
            mode: DiffSpeakerMode::ShiftRequired,
            buckets: 2,
            epochs: 4,
            window: 5,
            retrieval_k: 3,
            embedder: Backend::Stub,
            embed_model: "text-embedding".into(),
            embed_dim: None,
            chat: Backend::Stub,
            model_id: "stub".into(),
            knowledge_model_id: "stub".into(),
            cache: None,
            seeds: vec![0],
            workers: 4,
            exclude_own_dialogue: true,
            targets: BTreeMap::new(),
            generation: GenerationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    pub fn wes(&self) -> Result<WesParams, CliError> {
        WesParams::new(self.k, self.b).map_err(CliError::usage)
    }

    pub fn wheel_for(&self, labels: &[String]) -> Result<EmotionWheel, CliError> {
        match &self.wheel {
            Some(p) => EmotionWheel::load(p).map_err(CliError::data),
            None => EmotionWheel::circumplex(labels).map_err(CliError::data),
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            w: self.window,
            retrieval_k: self.retrieval_k,
            model_id: self.model_id.clone(),
            knowledge_model_id: self.knowledge_model_id.clone(),
            exclude_own_dialogue: self.exclude_own_dialogue,
            workers: self.workers,
        }
    }

    pub fn embedder(&self) -> Result<Box<dyn Embedder>, CliError> {
        Ok(match self.embedder {
            Backend::Stub => Box::new(StubEmbedder::new(self.embed_dim.unwrap_or(DEFAULT_STUB_DIM))),
            Backend::Http => {
                let endpoint = ApiEndpoint::from_env().map_err(CliError::usage)?;
                Box::new(HttpEmbedder::new(endpoint, &self.embed_model, self.embed_dim).map_err(CliError::usage)?)
            }
        })
    }

    pub fn chat_client(&self) -> Result<ChatClient, CliError> {
        let client = match self.chat {
            Backend::Stub => ChatClient::stub(),
            Backend::Http => {
                let endpoint = ApiEndpoint::from_env().map_err(CliError::usage)?;
                ChatClient::new(Box::new(HttpChat::new(endpoint).map_err(CliError::usage)?))
            }
        };
        Ok(match &self.cache {
            Some(path) => client.with_cache(ResponseCache::open(path).map_err(CliError::data)?),
            None => client,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

/// `--seeds 5` means seeds 0..5; `--seeds 3,7` lists them.
pub fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let parse = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("{t:?}: {e}"));
    if s.contains(',') {
        s.split(',').filter(|t| !t.trim().is_empty()).map(parse).collect::<Result<_, _>>().map(SeedList)
    } else {
        let n = parse(s)?;
        if n == 0 {
            return Err("seed count must be at least 1".into());
        }
        Ok(SeedList((0..n).collect()))
    }
}

/// `emotion=count`, e.g. `fear=500`.
pub fn parse_target(s: &str) -> Result<(BasicEmotion, usize), String> {
    let (e, n) = s.split_once('=').ok_or_else(|| format!("expected emotion=count, got {s:?}"))?;
    let emotion = e.trim().parse::<BasicEmotion>().map_err(|err| err.to_string())?;
    let n = n.trim().parse::<usize>().map_err(|err| format!("{n:?}: {err}"))?;
    Ok((emotion, n))
}
