//! Chat-completion and embedding clients.
//!
//! [`ChatClient`] wraps a [`ChatBackend`] with a disk-backed response cache,
//! exponential-backoff retries on transient failures and a bound on the
//! number of in-flight backend calls. Both backends have deterministic
//! offline stubs so whole pipelines can run without a network.

mod cache;
mod http;
mod stub;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::ResponseCache;
pub use http::{ApiEndpoint, HttpChat, HttpEmbedder, API_BASE_ENV, API_KEY_ENV};
pub use stub::{StubChat, StubEmbedder, DEFAULT_STUB_DIM};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("embedding input is empty")]
    EmptyInput,
    #[error("embedding dimension changed from {expected} to {found}")]
    DimensionDrift { expected: usize, found: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("client configuration: {0}")]
    Config(String),
    #[error("response cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Failure classes a backend reports for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Worth retrying: network errors, 429, 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("auth: {0}")]
    Auth(String),
    #[error("malformed: {0}")]
    Malformed(String),
    /// Other 4xx responses; retrying will not help.
    #[error("rejected: {0}")]
    Rejected(String),
}

impl From<BackendError> for ClientError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Transient(m) => ClientError::RetriesExhausted { attempts: 1, last: m },
            BackendError::Auth(m) => ClientError::Auth(m),
            BackendError::Malformed(m) => ClientError::Malformed(m),
            BackendError::Rejected(m) => ClientError::Rejected(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_text: Option<String>,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    /// Temperature 0 and a 512-token output budget.
    pub fn new(model_id: impl Into<String>, user_text: impl Into<String>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            system_text: None,
            user_text: user_text.into(),
            temperature: 0.0,
            max_output_tokens: 512,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system_text = Some(system.into());
        self
    }

    pub fn with_max_tokens(mut self, max: u32) -> Self {
        self.max_output_tokens = max;
        self
    }

    fn validate(&self) -> Result<(), ClientError> {
        if self.user_text.trim().is_empty() {
            return Err(ClientError::InvalidRequest("user text is empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ClientError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// What a backend returns for one successful call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    #[serde(default)]
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
    pub cached: bool,
    /// Backend calls made for this response (0 on a cache hit).
    pub attempts: u32,
}

/// SHA-256 over the canonical JSON of every request field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn of(req: &ChatRequest) -> Self {
        let canonical = serde_json::to_vec(req).expect("request serializes");
        CacheKey(hex::encode(Sha256::digest(&canonical)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, req: &ChatRequest) -> Result<Completion, BackendError>;
}

pub trait Embedder: Send + Sync {
    /// Identifies the model that produced the vectors.
    fn id(&self) -> String;
    /// Output dimension, if known before the first call.
    fn dim(&self) -> Option<usize>;
    /// One vector per input, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Runs `op` until it succeeds, fails permanently, or the retry budget is
    /// spent. Returns the value and the number of attempts made.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<(T, u32), ClientError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok((v, attempt)),
                Err(BackendError::Transient(msg)) => {
                    if attempt > self.max_retries {
                        return Err(ClientError::RetriesExhausted { attempts: attempt, last: msg });
                    }
                    let wait = self.delay(attempt - 1);
                    tracing::warn!(attempt, retry = attempt, ?wait, error = %msg, "transient failure, retrying");
                    std::thread::sleep(wait);
                }
                Err(other) => return Err(other.into()),
            }
        }
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            available: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

pub struct ChatClient {
    backend: Box<dyn ChatBackend>,
    cache: Option<Mutex<ResponseCache>>,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl ChatClient {
    pub fn new(backend: Box<dyn ChatBackend>) -> Self {
        ChatClient {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(DEFAULT_MAX_IN_FLIGHT),
        }
    }

    pub fn stub() -> Self {
        ChatClient::new(Box::new(StubChat))
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(Mutex::new(cache));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = Limiter::new(n);
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, ClientError> {
        req.validate()?;
        let key = CacheKey::of(req);
        if let Some(cache) = &self.cache {
            let cache = cache.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(hit) = cache.get(&key) {
                return Ok(ChatResponse {
                    text: hit.text.clone(),
                    usage: hit.usage,
                    cached: true,
                    attempts: 0,
                });
            }
        }
        let (completion, attempts) = {
            let _permit = self.limiter.acquire();
            self.retry.run(|| self.backend.complete(req))?
        };
        if attempts > 1 {
            tracing::info!(attempts, retries = attempts - 1, backend = self.backend.name(), "request succeeded after retries");
        }
        if let Some(cache) = &self.cache {
            let mut cache = cache.lock().unwrap_or_else(|e| e.into_inner());
            cache.insert(key, completion.clone())?;
        }
        Ok(ChatResponse {
            text: completion.text,
            usage: completion.usage,
            cached: false,
            attempts,
        })
    }
}
