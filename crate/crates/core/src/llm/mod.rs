//! Text-generation backends behind a retrying, audited gateway.

mod audit;
mod mock;
mod parse;
mod remote;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use audit::{read_audit_file, AuditEntry, AuditLog};
pub use mock::{MockRule, MockScript, Reply, RuleMatch, ScriptedMockBackend};
pub use parse::{parse_enumerated_items, parse_enumerated_items_for_prompt};
pub use remote::RemoteChatBackend;

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
    pub stop: Option<Vec<String>>,
    /// `stage/class/detail`, used for audit and script matching.
    pub request_tag: String,
    /// Per-request sampling seed, forwarded to backends that accept one.
    pub seed: Option<u64>,
}

/// Decoding parameters shared by every request of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 1.0,
            repetition_penalty: 1.15,
            max_tokens: 512,
        }
    }
}

impl DecodingParams {
    pub fn request(&self, prompt: String, tag: String, seed: Option<u64>) -> GenerationRequest {
        GenerationRequest {
            prompt,
            temperature: self.temperature,
            repetition_penalty: self.repetition_penalty,
            max_tokens: self.max_tokens,
            stop: None,
            request_tag: tag,
            seed,
        }
    }
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Precondition(format!("empty prompt for `{}`", self.request_tag)));
        }
        if self.repetition_penalty.is_nan() || self.repetition_penalty < 1.0 {
            return Err(Error::Precondition(format!(
                "repetition_penalty {} < 1.0",
                self.repetition_penalty
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::Precondition("temperature must be non-negative".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Precondition("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn prompt_hash(&self) -> String {
        sha256_hex(&self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub raw_text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub request_tag: String,
    pub attempts: u32,
}

/// Failure modes a backend reports to the gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying (timeouts, 429, 5xx).
    Transient(String),
    /// Not worth retrying (4xx, malformed responses).
    Fatal(String),
    /// Strict mock with no matching script entry.
    Unscripted,
}

impl std::fmt::Display for BackendError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendError::Transient(m) => write!(f, "transient: {m}"),
            BackendError::Fatal(m) => write!(f, "fatal: {m}"),
            BackendError::Unscripted => f.write_str("unscripted request"),
        }
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn call(&self, request: &GenerationRequest) -> std::result::Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before attempt `attempt + 1`, doubling from the base.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// The single entry point for text generation.
pub struct LlmGateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
    audit: Arc<AuditLog>,
    calls: AtomicUsize,
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn Backend>, retry: RetryPolicy, audit: Arc<AuditLog>) -> Self {
        LlmGateway {
            backend,
            retry,
            audit,
            calls: AtomicUsize::new(0),
        }
    }

    /// Gateway with an in-memory audit log and no retry delay.
    pub fn simple(backend: Arc<dyn Backend>) -> Self {
        Self::new(backend, RetryPolicy::no_delay(3), Arc::new(AuditLog::in_memory()))
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    /// Backend attempts issued so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn complete(&self, request: &GenerationRequest) -> Result<GenerationResponse> {
        request.validate()?;
        let prompt_hash = request.prompt_hash();
        let max_attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            self.calls.fetch_add(1, Ordering::Relaxed);
            let started = Instant::now();
            let outcome = self.backend.call(request);
            let latency_ms = started.elapsed().as_millis() as u64;
            let (raw_text_hash, error) = match &outcome {
                Ok(text) => (Some(sha256_hex(text)), None),
                Err(e) => (None, Some(e.to_string())),
            };
            self.audit.record(AuditEntry {
                request_tag: request.request_tag.clone(),
                prompt_hash: prompt_hash.clone(),
                raw_text_hash,
                latency_ms,
                attempt,
                error,
            })?;
            match outcome {
                Ok(raw_text) => {
                    if attempt > 1 {
                        log::info!("`{}` succeeded after {} retries", request.request_tag, attempt - 1);
                    }
                    return Ok(GenerationResponse {
                        raw_text,
                        backend_id: self.backend.id().to_string(),
                        latency_ms,
                        request_tag: request.request_tag.clone(),
                        attempts: attempt,
                    });
                }
                Err(BackendError::Unscripted) => {
                    return Err(Error::UnscriptedRequest(request.request_tag.clone()))
                }
                Err(BackendError::Fatal(message)) => {
                    return Err(Error::Backend {
                        tag: request.request_tag.clone(),
                        message,
                    })
                }
                Err(BackendError::Transient(message)) => {
                    log::warn!("`{}` attempt {attempt} failed: {message}", request.request_tag);
                    last = message;
                    if attempt < max_attempts {
                        std::thread::sleep(self.retry.delay_after(attempt));
                    }
                }
            }
        }
        Err(Error::RetriesExhausted {
            tag: request.request_tag.clone(),
            attempts: max_attempts,
            message: last,
        })
    }
}
