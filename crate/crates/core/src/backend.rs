//! Text generation behind one interface: the in-process toy model or a
//! remote inference service speaking a small JSON protocol.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toymodel::{generate_greedy, ModelParams, Vocab};

pub const BACKEND_URL_ENV: &str = "ICXLT_BACKEND_URL";
pub const WORKERS_ENV: &str = "ICXLT_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub decoding: Decoding,
}

impl GenerationRequest {
    pub fn greedy(prompt: impl Into<String>, max_new_tokens: usize) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            max_new_tokens,
            decoding: Decoding::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_retries: usize,
    /// `Name: value`, sent with every request.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auth_header: Option<String>,
    /// Concurrent requests during evaluation.
    pub workers: usize,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://127.0.0.1:8080".into(),
            timeout_ms: 30_000,
            max_retries: 2,
            auth_header: None,
            workers: 4,
            backoff_ms: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    #[default]
    Toy,
    Remote(RemoteConfig),
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if let BackendConfig::Remote(r) = self {
            if r.timeout_ms == 0 {
                return Err(Error::ConfigError("timeout_ms must be positive".into()));
            }
            if r.workers == 0 {
                return Err(Error::ConfigError("workers must be at least 1".into()));
            }
            if let Some(h) = &r.auth_header {
                if !h.contains(':') {
                    return Err(Error::ConfigError("auth_header must look like `Name: value`".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, BackendConfig::Remote(_))
    }
}

pub trait Backend: Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String>;

    /// Parallel requests worth issuing during evaluation.
    fn workers(&self) -> usize {
        1
    }
}

/// Greedy decoding with in-memory parameters.
#[derive(Debug, Clone)]
pub struct ToyBackend<'a> {
    pub params: &'a ModelParams,
    pub vocab: &'a Vocab,
    pub workers: usize,
}

impl<'a> ToyBackend<'a> {
    pub fn new(params: &'a ModelParams, vocab: &'a Vocab) -> Self {
        ToyBackend {
            params,
            vocab,
            workers: 1,
        }
    }
}

impl Backend for ToyBackend<'_> {
    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        if request.max_new_tokens == 0 {
            return Err(Error::ConfigError("max_new_tokens must be at least 1".into()));
        }
        let ids = self.vocab.encode_prompt(&request.prompt);
        let labels = generate_greedy(self.params, &ids, request.max_new_tokens)?;
        Ok(self.vocab.decode_labels(&labels))
    }

    fn workers(&self) -> usize {
        self.workers.max(1)
    }
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

enum Attempt {
    Done(String),
    Fatal(Error),
    Timeout,
    Retryable(String),
}

impl Attempt {
    fn from_transport(e: reqwest::Error) -> Self {
        if e.is_timeout() {
            Attempt::Timeout
        } else {
            Attempt::Retryable(e.to_string())
        }
    }
}

/// Blocking HTTP client for `POST {base_url}/generate`.
pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    url: String,
}

impl RemoteBackend {
    /// `ICXLT_BACKEND_URL`, when set, replaces `base_url`.
    pub fn new(mut config: RemoteConfig) -> Result<Self> {
        if let Ok(url) = std::env::var(BACKEND_URL_ENV) {
            if !url.is_empty() {
                config.base_url = url;
            }
        }
        BackendConfig::Remote(config.clone()).validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| Error::BackendProtocolError(format!("client setup: {e}")))?;
        let url = format!("{}/generate", config.base_url.trim_end_matches('/'));
        Ok(RemoteBackend { config, client, url })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn attempt(&self, request: &GenerationRequest) -> Attempt {
        let mut req = self.client.post(&self.url).json(request);
        if let Some((name, value)) = self.config.auth_header.as_deref().and_then(|h| h.split_once(':')) {
            req = req.header(name.trim(), value.trim());
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::from_transport(e),
        };
        let status = resp.status();
        if status.is_server_error() {
            return Attempt::Retryable(format!("HTTP {status}"));
        }
        let body = match resp.text() {
            Ok(b) => b,
            Err(e) => return Attempt::from_transport(e),
        };
        if !status.is_success() {
            return Attempt::Fatal(Error::BackendProtocolError(format!("HTTP {status}: {body}")));
        }
        match serde_json::from_str::<WireResponse>(&body) {
            Ok(r) => Attempt::Done(r.text),
            Err(e) => Attempt::Fatal(Error::BackendProtocolError(format!("bad response body: {e}"))),
        }
    }
}

impl Backend for RemoteBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        if request.max_new_tokens == 0 {
            return Err(Error::ConfigError("max_new_tokens must be at least 1".into()));
        }
        let attempts = self.config.max_retries + 1;
        let mut last = Attempt::Timeout;
        for i in 0..attempts {
            if i > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (i - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(request) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retryable(msg) => {
                    log::warn!("backend attempt {} of {attempts} failed: {msg}", i + 1);
                    last = Attempt::Retryable(msg);
                }
                Attempt::Timeout => {
                    log::warn!("backend attempt {} of {attempts} timed out", i + 1);
                    last = Attempt::Timeout;
                }
            }
        }
        Err(match last {
            Attempt::Retryable(last_error) => Error::BackendUnavailable { attempts, last_error },
            _ => Error::BackendTimeout { attempts },
        })
    }

    fn workers(&self) -> usize {
        self.config.workers
    }
}

/// Worker count from `ICXLT_WORKERS`, falling back to `default`.
pub fn workers_from_env(default: usize) -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or(default)
}

/// Issue every request with up to `backend.workers()` in flight. Outputs
/// come back in request order whatever order they finished in.
pub fn generate_all(backend: &dyn Backend, requests: &[GenerationRequest]) -> Vec<Result<String>> {
    let workers = backend.workers().clamp(1, requests.len().max(1));
    if workers == 1 {
        return requests.iter().map(|r| backend.generate(r)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<String>>>> = Mutex::new((0..requests.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= requests.len() {
                    break;
                }
                let out = backend.generate(&requests[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every request was issued"))
        .collect()
}
