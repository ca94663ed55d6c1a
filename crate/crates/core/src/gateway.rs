//! Backend-neutral "generate with trace" contract.
//!
//! Backends return raw [`TraceData`]; the [`Gateway`] validates every
//! payload before anything downstream sees it and retries transient
//! transport failures a bounded number of times.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::mock::MockBackend;
use crate::trace::{GenerationTrace, PromptRegion, TraceData, TraceError, ATTENTION_POLICY};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {message}")]
    Transport { message: String, retryable: bool },
    #[error("backend error {code}: {message}")]
    Backend { code: String, message: String },
    #[error("malformed trace: {0}")]
    Validation(#[from] TraceError),
    #[error("trace has {got} tokens but max_new_tokens was {max}")]
    OverLength { got: usize, max: usize },
    #[error("no scripted continuation matches prompt ending {0:?}")]
    NoScript(String),
    #[error("unsupported backend url {0:?}")]
    UnsupportedUrl(String),
    #[error("mock script {path}: {message}")]
    Script { path: PathBuf, message: String },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport { retryable: true, .. })
    }
}

/// Byte span of the prompt tagged with the role of its text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpan {
    pub start: usize,
    pub end: usize,
    pub region: PromptRegion,
}

fn default_policy() -> String {
    ATTENTION_POLICY.to_string()
}

/// Body of `POST /generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    #[serde(default)]
    pub stop_markers: Vec<String>,
    pub want_attention: bool,
    /// Lets the backend tag prompt tokens with their region.
    #[serde(default)]
    pub regions: Vec<RegionSpan>,
    #[serde(default = "default_policy")]
    pub policy: String,
}

impl GenerateRequest {
    pub fn new(prompt: impl Into<String>, max_new_tokens: usize) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens,
            stop_markers: vec![],
            want_attention: true,
            regions: vec![],
            policy: default_policy(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_new_tokens must be at least 1".into()));
        }
        if self.regions.iter().any(|r| r.start > r.end || r.end > self.prompt.len()) {
            return Err(GatewayError::InvalidRequest("region span outside the prompt".into()));
        }
        Ok(())
    }
}

/// Structured error body a sidecar returns on non-2xx responses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerateRequest) -> Result<TraceData, GatewayError>;
}

/// JSON-over-HTTP client for a trace sidecar.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport { message: e.to_string(), retryable: false })?;
        let endpoint = format!("{}/generate", base_url.trim_end_matches('/'));
        Ok(Self { endpoint, client })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl Backend for HttpBackend {
    fn generate(&self, request: &GenerateRequest) -> Result<TraceData, GatewayError> {
        let resp = self.client.post(&self.endpoint).json(request).send().map_err(|e| GatewayError::Transport {
            retryable: e.is_timeout() || e.is_connect(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| GatewayError::Transport { retryable: e.is_timeout(), message: e.to_string() })?;
        if status.is_success() {
            return serde_json::from_str(&body).map_err(|e| {
                GatewayError::Validation(TraceError::Distribution(format!("undecodable trace body: {e}")))
            });
        }
        if let Ok(err) = serde_json::from_str::<ErrorBody>(&body) {
            return Err(GatewayError::Backend { code: err.error.code, message: err.error.message });
        }
        Err(GatewayError::Transport {
            retryable: status.is_server_error(),
            message: format!("HTTP {status}: {body}"),
        })
    }
}

/// Resolves `mock://<script-file>` or `http(s)://host` into a backend.
pub fn backend_from_url(url: &str, timeout: Duration) -> Result<Arc<dyn Backend>, GatewayError> {
    if let Some(path) = url.strip_prefix("mock://") {
        Ok(Arc::new(MockBackend::load(path.as_ref())?))
    } else if url.starts_with("http://") || url.starts_with("https://") {
        Ok(Arc::new(HttpBackend::new(url, timeout)?))
    } else {
        Err(GatewayError::UnsupportedUrl(url.to_string()))
    }
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    max_retries: u32,
    backoff: Duration,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("max_retries", &self.max_retries).finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self { backend, max_retries: 2, backoff: Duration::from_millis(250) }
    }

    pub fn with_retries(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    /// Generates, retrying retryable transport errors, then validates.
    pub fn generate(&self, request: &GenerateRequest) -> Result<GenerationTrace, GatewayError> {
        request.validate()?;
        let mut attempt = 0;
        let data = loop {
            match self.backend.generate(request) {
                Ok(d) => break d,
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    attempt += 1;
                    warn!(attempt, error = %e, "retrying generate");
                    std::thread::sleep(self.backoff * attempt);
                }
                Err(e) => return Err(e),
            }
        };
        let trace = data.validate()?;
        if trace.len() > request.max_new_tokens {
            return Err(GatewayError::OverLength { got: trace.len(), max: request.max_new_tokens });
        }
        Ok(trace)
    }
}
