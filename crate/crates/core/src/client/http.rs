use std::sync::Mutex;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest, ClientError, Completion, Embedder, RetryPolicy, Usage};

pub const API_BASE_ENV: &str = "PRC_EMO_API_BASE";
pub const API_KEY_ENV: &str = "PRC_EMO_API_KEY";

/// Base URL (e.g. `https://host/v1`) and optional bearer token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiEndpoint {
    pub base: String,
    pub key: Option<String>,
}

impl ApiEndpoint {
    pub fn new(base: impl Into<String>, key: Option<String>) -> Self {
        ApiEndpoint {
            base: base.into().trim_end_matches('/').to_string(),
            key,
        }
    }

    pub fn from_env() -> Result<Self, ClientError> {
        let base = std::env::var(API_BASE_ENV)
            .map_err(|_| ClientError::Config(format!("{API_BASE_ENV} is not set")))?;
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Ok(ApiEndpoint::new(base, key))
    }

    fn post(&self, http: &Client, path: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = http.post(format!("{}/{}", self.base, path)).json(body);
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        classify(status, &text)?;
        serde_json::from_str(&text).map_err(|e| BackendError::Malformed(format!("{e}: {}", truncate(&text))))
    }
}

fn classify(status: StatusCode, body: &str) -> Result<(), BackendError> {
    if status.is_success() {
        return Ok(());
    }
    let msg = format!("HTTP {}: {}", status.as_u16(), truncate(body));
    Err(match status {
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => BackendError::Auth(msg),
        StatusCode::TOO_MANY_REQUESTS | StatusCode::REQUEST_TIMEOUT => BackendError::Transient(msg),
        s if s.is_server_error() => BackendError::Transient(msg),
        _ => BackendError::Rejected(msg),
    })
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

fn http_client(timeout: Duration) -> Result<Client, ClientError> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| ClientError::Config(e.to_string()))
}

/// Chat-completions wire format: `POST {base}/chat/completions`.
pub struct HttpChat {
    endpoint: ApiEndpoint,
    http: Client,
}

impl HttpChat {
    pub fn new(endpoint: ApiEndpoint) -> Result<Self, ClientError> {
        Ok(HttpChat {
            endpoint,
            http: http_client(Duration::from_secs(120))?,
        })
    }
}

pub(crate) fn chat_body(req: &ChatRequest) -> Value {
    let mut messages = Vec::new();
    if let Some(system) = &req.system_text {
        messages.push(json!({"role": "system", "content": system}));
    }
    messages.push(json!({"role": "user", "content": req.user_text}));
    json!({
        "model": req.model_id,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_output_tokens,
    })
}

#[derive(Deserialize)]
struct ChatReply {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub(crate) fn parse_chat_reply(body: Value) -> Result<Completion, BackendError> {
    let reply: ChatReply = serde_json::from_value(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let text = reply
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::Malformed("no message content in first choice".into()))?;
    let usage = reply
        .usage
        .map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        })
        .unwrap_or_default();
    Ok(Completion { text, usage })
}

impl ChatBackend for HttpChat {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError> {
        let body = self.endpoint.post(&self.http, "chat/completions", &chat_body(req))?;
        parse_chat_reply(body)
    }
}

/// Embedding endpoint: `POST {base}/embeddings` with `{"input": [...]}`.
pub struct HttpEmbedder {
    endpoint: ApiEndpoint,
    model: String,
    http: Client,
    retry: RetryPolicy,
    dim: Mutex<Option<usize>>,
}

impl HttpEmbedder {
    pub fn new(endpoint: ApiEndpoint, model: impl Into<String>, dim: Option<usize>) -> Result<Self, ClientError> {
        Ok(HttpEmbedder {
            endpoint,
            model: model.into(),
            http: http_client(Duration::from_secs(60))?,
            retry: RetryPolicy::default(),
            dim: Mutex::new(dim),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbedReply {
    Data { data: Vec<EmbedDatum> },
    Embeddings { embeddings: Vec<Vec<f32>> },
    Bare(Vec<Vec<f32>>),
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f32>,
    #[serde(default)]
    index: Option<usize>,
}

pub(crate) fn parse_embed_reply(body: Value, expected: usize) -> Result<Vec<Vec<f32>>, BackendError> {
    let reply: EmbedReply = serde_json::from_value(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let vectors = match reply {
        EmbedReply::Data { mut data } => {
            if data.iter().all(|d| d.index.is_some()) {
                data.sort_by_key(|d| d.index);
            }
            data.into_iter().map(|d| d.embedding).collect()
        }
        EmbedReply::Embeddings { embeddings } => embeddings,
        EmbedReply::Bare(v) => v,
    };
    if vectors.len() != expected {
        return Err(BackendError::Malformed(format!(
            "expected {expected} vectors, got {}",
            vectors.len()
        )));
    }
    Ok(vectors)
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}", self.model)
    }

    fn dim(&self) -> Option<usize> {
        *self.dim.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        if texts.is_empty() {
            return Err(ClientError::EmptyInput);
        }
        let body = json!({"input": texts, "model": self.model});
        let (vectors, _) = self.retry.run(|| {
            let reply = self.endpoint.post(&self.http, "embeddings", &body)?;
            parse_embed_reply(reply, texts.len())
        })?;
        let mut dim = self.dim.lock().unwrap_or_else(|e| e.into_inner());
        for v in &vectors {
            match *dim {
                None => *dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(ClientError::DimensionDrift {
                        expected: d,
                        found: v.len(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(vectors)
    }
}
