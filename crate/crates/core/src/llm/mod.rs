//! Chat-completion client with pluggable backends.
//!
//! [`LlmClient`] wraps a [`ChatBackend`] with retry, an in-flight request
//! cap, optional audit logging and per-stage token accounting.

mod http;
pub mod mock;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::MockBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Pipeline stage label used for logging and accounting.
    pub tag: String,
    /// Structured description of the request for offline backends. Never
    /// sent over the wire.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

impl CompletionRequest {
    pub fn user(tag: impl Into<String>, prompt: impl Into<String>) -> Self {
        CompletionRequest {
            messages: vec![Message {
                role: Role::User,
                content: prompt.into(),
            }],
            temperature: 0.7,
            max_tokens: 512,
            tag: tag.into(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn with_sampling(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// What a backend returns for one attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCompletion {
    pub text: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Transport attempts used, including the successful one.
    pub attempts: u32,
    pub usage: Usage,
}

/// Failure of a single backend attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("gave up after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("timed out on all {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

impl LlmError {
    /// Stable machine-readable identifier.
    pub fn kind(&self) -> &'static str {
        match self {
            LlmError::Exhausted { .. } => "exhausted",
            LlmError::Timeout { .. } => "timeout",
            LlmError::Auth(_) => "auth",
            LlmError::Rejected(_) => "rejected",
            LlmError::Config(_) => "config",
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, req: &CompletionRequest) -> Result<RawCompletion, TransportError>;
}

/// Backend from a closure; handy for scripted tests.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<RawCompletion, TransportError> + Send + Sync,
{
    fn send(&self, req: &CompletionRequest) -> Result<RawCompletion, TransportError> {
        (self.0)(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 500,
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = self.backoff_ms as f64 * self.backoff_factor.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis(ms.min(60_000.0) as u64)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(cap: usize) -> Self {
        Limiter {
            free: Mutex::new(cap.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub requests: u64,
    pub attempts: u64,
    pub failures: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Per-stage token and request counters.
#[derive(Debug, Default)]
pub struct Accounting {
    stages: Mutex<BTreeMap<String, StageCost>>,
}

impl Accounting {
    fn record(&self, tag: &str, attempts: u32, usage: Option<Usage>) {
        let mut stages = self.stages.lock().unwrap();
        let entry = stages.entry(tag.to_string()).or_default();
        entry.requests += 1;
        entry.attempts += attempts as u64;
        match usage {
            Some(u) => {
                entry.prompt_tokens += u.prompt_tokens;
                entry.completion_tokens += u.completion_tokens;
            }
            None => entry.failures += 1,
        }
    }

    pub fn snapshot(&self) -> BTreeMap<String, StageCost> {
        self.stages.lock().unwrap().clone()
    }
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    tag: &'a str,
    attempt: u32,
    messages: &'a [Message],
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Line-delimited request/response log. Each record is written and flushed
/// under one lock so concurrent writers never interleave.
#[derive(Debug)]
pub struct AuditLog {
    out: Mutex<BufWriter<File>>,
}

impl AuditLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog {
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    fn write(&self, rec: &AuditRecord<'_>) {
        let mut line = serde_json::to_string(rec).expect("audit record serializes");
        line.push('\n');
        let mut out = self.out.lock().unwrap();
        // audit failures must not fail generation
        let _ = out.write_all(line.as_bytes()).and_then(|_| out.flush());
    }
}

fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    policy: RetryPolicy,
    limiter: Arc<Limiter>,
    audit: Option<Arc<AuditLog>>,
    accounting: Arc<Accounting>,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>, policy: RetryPolicy) -> Self {
        LlmClient {
            backend,
            policy,
            limiter: Arc::new(Limiter::new(8)),
            audit: None,
            accounting: Arc::new(Accounting::default()),
        }
    }

    pub fn mock(seed: u64) -> Self {
        Self::new(Arc::new(MockBackend::new(seed)), RetryPolicy::default())
    }

    pub fn with_limiter(mut self, limiter: Arc<Limiter>) -> Self {
        self.limiter = limiter;
        self
    }

    pub fn with_audit(mut self, audit: Arc<AuditLog>) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn with_accounting(mut self, accounting: Arc<Accounting>) -> Self {
        self.accounting = accounting;
        self
    }

    pub fn accounting(&self) -> &Arc<Accounting> {
        &self.accounting
    }

    pub fn complete(&self, req: &CompletionRequest) -> Result<Completion, LlmError> {
        if req.messages.is_empty() {
            return Err(LlmError::Config("request has no messages".into()));
        }
        let max = self.policy.max_attempts.max(1);
        let mut last = String::new();
        let mut all_timeouts = true;
        for attempt in 1..=max {
            let result = {
                let _permit = self.limiter.acquire();
                self.backend.send(req)
            };
            if let Some(audit) = &self.audit {
                audit.write(&AuditRecord {
                    tag: &req.tag,
                    attempt,
                    messages: &req.messages,
                    response: result.as_ref().ok().map(|r| r.text.as_str()),
                    error: result.as_ref().err().map(ToString::to_string),
                });
            }
            match result {
                Ok(raw) => {
                    let usage = raw.usage.unwrap_or_else(|| Usage {
                        prompt_tokens: req.messages.iter().map(|m| estimate_tokens(&m.content)).sum(),
                        completion_tokens: estimate_tokens(&raw.text),
                    });
                    self.accounting.record(&req.tag, attempt, Some(usage));
                    return Ok(Completion {
                        text: raw.text,
                        attempts: attempt,
                        usage,
                    });
                }
                Err(TransportError::Auth(msg)) => {
                    self.accounting.record(&req.tag, attempt, None);
                    return Err(LlmError::Auth(msg));
                }
                Err(TransportError::Fatal(msg)) => {
                    self.accounting.record(&req.tag, attempt, None);
                    return Err(LlmError::Rejected(msg));
                }
                Err(e) => {
                    if !matches!(e, TransportError::Timeout(_)) {
                        all_timeouts = false;
                    }
                    log::warn!("{}: attempt {attempt}/{max} failed: {e}", req.tag);
                    last = e.to_string();
                    if attempt < max {
                        std::thread::sleep(self.policy.delay(attempt));
                    }
                }
            }
        }
        self.accounting.record(&req.tag, max, None);
        if all_timeouts {
            Err(LlmError::Timeout { attempts: max })
        } else {
            Err(LlmError::Exhausted { attempts: max, last })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            model: "gpt-3.5-turbo".into(),
            auth_env: None,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.kind == BackendKind::Http {
            if self.endpoint.as_deref().unwrap_or("").is_empty() {
                return Err(LlmError::Config("http backend requires `endpoint`".into()));
            }
            if self.auth_env.as_deref().unwrap_or("").is_empty() {
                return Err(LlmError::Config("http backend requires `auth_env`".into()));
            }
        }
        Ok(())
    }

    pub fn build(&self, seed: u64) -> Result<LlmClient, LlmError> {
        self.validate()?;
        let backend: Arc<dyn ChatBackend> = match self.kind {
            BackendKind::Mock => Arc::new(MockBackend::new(seed)),
            BackendKind::Http => Arc::new(HttpBackend::new(
                self.endpoint.clone().unwrap_or_default(),
                self.model.clone(),
                self.auth_env.clone().unwrap_or_default(),
                Duration::from_secs(self.timeout_secs),
            )),
        };
        Ok(LlmClient::new(backend, self.retry))
    }
}

/// Extract the first balanced `{...}` object literal from noisy text.
pub fn extract_json_object(text: &str) -> Option<serde_json::Value> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        if let Ok(v) = serde_json::from_str(&text[open..=i]) {
                            return Some(v);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
        start = open + 1;
    }
    None
}
