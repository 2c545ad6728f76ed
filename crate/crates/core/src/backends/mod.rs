//! Model invocation.
//!
//! Every backend implements [`Backend`]. Real deployments compose layers
//! around a transport: `Cached<Retrying<Metered<inner>>>`, so cache hits skip
//! the retry loop and every attempt that reaches `inner` is counted.

mod cache;
mod request;
mod script;
mod segment;
mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use cache::{CacheEntry, Cached, ResponseCache};
pub use request::{
    cache_key, ContentPart, Decoding, Message, ModelRequest, ModelResponse, PartKind, Role, Usage,
};
pub use script::{MatchKind, ScriptLine, ScriptMode, ScriptRule, ScriptedBackend};
pub use segment::{
    HttpSegmenter, SegmentError, SegmentationResult, Segmenter, StubEntry, StubSegmenter,
};
pub use wire::{ChatCompletionsBackend, WireConfig};

use crate::canonical::Digest;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("authentication failed: {0}")]
    Auth(String),
    /// Retryable failure (timeout, connection reset, 429, 5xx, injected fault).
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { message: String, attempts: u32 },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("service returned an empty response")]
    EmptyResponse,
    #[error("no script entry for request {0}")]
    ScriptMiss(Digest),
    #[error("offline: request {0} is not in the cache")]
    Offline(Digest),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transient(_))
    }
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        (**self).complete(request)
    }
}

/// Counters shared by the layers of one backend stack (or several stacks).
#[derive(Debug, Default)]
pub struct CallStats {
    remote_calls: AtomicU64,
    cache_hits: AtomicU64,
    cache_misses: AtomicU64,
    retries: AtomicU64,
    failures: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub remote_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub retries: u64,
    pub failures: u64,
}

impl CallStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            remote_calls: self.remote_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            cache_misses: self.cache_misses.load(Ordering::SeqCst),
            retries: self.retries.load(Ordering::SeqCst),
            failures: self.failures.load(Ordering::SeqCst),
        }
    }

    pub(crate) fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::SeqCst);
    }
}

/// Counts every call that reaches the wrapped backend.
pub struct Metered<B> {
    inner: B,
    stats: Arc<CallStats>,
}

impl<B: Backend> Metered<B> {
    pub fn new(inner: B, stats: Arc<CallStats>) -> Self {
        Self { inner, stats }
    }
}

impl<B: Backend> Backend for Metered<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        CallStats::bump(&self.stats.remote_calls);
        let started = Instant::now();
        let mut resp = self.inner.complete(request)?;
        if resp.latency_ms == 0 {
            resp.latency_ms = started.elapsed().as_millis() as u64;
        }
        Ok(resp)
    }
}

/// Exponential backoff: the wait after failed attempt `k` is `base·factor^(k−1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { base: Duration::from_secs(1), factor: 2.0, max_attempts: 5 }
    }
}

impl RetryPolicy {
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }

    /// Waits between consecutive attempts, `max_attempts − 1` entries.
    pub fn schedule(&self) -> Vec<Duration> {
        (1..self.max_attempts).map(|k| self.delay_after(k)).collect()
    }
}

type Sleeper = dyn Fn(Duration) + Send + Sync;

/// Retries transient failures according to a [`RetryPolicy`].
pub struct Retrying<B> {
    inner: B,
    policy: RetryPolicy,
    stats: Arc<CallStats>,
    sleep: Box<Sleeper>,
}

impl<B: Backend> Retrying<B> {
    pub fn new(inner: B, policy: RetryPolicy, stats: Arc<CallStats>) -> Self {
        Self { inner, policy, stats, sleep: Box::new(std::thread::sleep) }
    }

    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }
}

impl<B: Backend> Backend for Retrying<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let started = Instant::now();
        let mut attempt = 1;
        loop {
            match self.inner.complete(request) {
                Ok(mut resp) => {
                    resp.attempts = attempt;
                    if attempt > 1 {
                        resp.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    return Ok(resp);
                }
                Err(e) if e.is_transient() && attempt < self.policy.max_attempts => {
                    log::warn!("{}: attempt {attempt} failed ({e}); retrying", self.inner.id());
                    CallStats::bump(&self.stats.retries);
                    (self.sleep)(self.policy.delay_after(attempt));
                    attempt += 1;
                }
                Err(e) => {
                    CallStats::bump(&self.stats.failures);
                    return Err(match e {
                        BackendError::Transient(message) => BackendError::Transport { message, attempts: attempt },
                        other => other,
                    });
                }
            }
        }
    }
}

/// Answers nothing; stacked under a cache to forbid remote calls.
pub struct Offline {
    id: String,
}

impl Offline {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into() }
    }
}

impl Backend for Offline {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        Err(BackendError::Offline(cache_key(request)))
    }
}

/// Backend driven by a closure; the building block for scripted doubles.
pub struct FnBackend<F> {
    id: String,
    respond: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&ModelRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(id: impl Into<String>, respond: F) -> Self {
        Self { id: id.into(), respond }
    }
}

impl<F> Backend for FnBackend<F>
where
    F: Fn(&ModelRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        (self.respond)(request).map(ModelResponse::new)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedCall {
    pub backend_id: String,
    pub request: ModelRequest,
    pub outcome: Result<String, BackendError>,
}

/// Records every request and outcome passing through.
pub struct CallLog<B> {
    inner: B,
    log: Arc<Mutex<Vec<LoggedCall>>>,
}

impl<B: Backend> CallLog<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, log: Arc::default() }
    }

    /// Shares an existing log, so several backends record into one sequence.
    pub fn shared(inner: B, log: Arc<Mutex<Vec<LoggedCall>>>) -> Self {
        Self { inner, log }
    }

    pub fn handle(&self) -> Arc<Mutex<Vec<LoggedCall>>> {
        Arc::clone(&self.log)
    }

    pub fn calls(&self) -> Vec<LoggedCall> {
        self.log.lock().expect("call log poisoned").clone()
    }
}

impl<B: Backend> Backend for CallLog<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let out = self.inner.complete(request);
        self.log.lock().expect("call log poisoned").push(LoggedCall {
            backend_id: self.inner.id().to_owned(),
            request: request.clone(),
            outcome: out.as_ref().map(|r| r.text.clone()).map_err(Clone::clone),
        });
        out
    }
}

/// Standard composition: optional cache over retry over metering.
pub fn stack(
    inner: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    policy: RetryPolicy,
    stats: Arc<CallStats>,
) -> Arc<dyn Backend> {
    let retrying = Retrying::new(Metered::new(inner, Arc::clone(&stats)), policy, Arc::clone(&stats));
    match cache {
        Some(cache) => Arc::new(Cached::new(retrying, cache, stats)),
        None => Arc::new(retrying),
    }
}
