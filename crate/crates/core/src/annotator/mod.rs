//! Client for the annotator model that writes pretraining data and, at evaluation time,
//! plays the model under test.
//!
//! [`AnnotatorClient`] wraps a [`Backend`] with request validation, bounded in-flight
//! concurrency, and retry with jittered exponential backoff. Two backends ship here:
//! [`HttpBackend`] and the deterministic [`MockAnnotator`].

mod http;
mod mock;

pub use http::{HttpBackend, TOKEN_ENV};
pub use mock::{MockAnnotator, MockAnnotatorConfig, MockTrace};

use crate::hashing::sha256_hex;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

/// What a request asks about. Not sent over the wire; backends that can see ground truth
/// (the mock) use it to route the request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RequestRoute {
    Caption {
        video_id: String,
        issue_id: String,
        variant: u32,
    },
    BinaryVqa {
        video_id: String,
        issue_id: String,
        subq_id: String,
    },
    MultiChoice {
        video_id: String,
        issue_ids: Vec<String>,
    },
    /// Zero-shot "does this video violate the issue?" classification.
    Classify {
        video_id: String,
        issue_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub prompt: String,
    pub frame_refs: Vec<String>,
    pub max_tokens: u32,
    pub want_label_logits: bool,
    #[serde(skip)]
    pub route: Option<RequestRoute>,
}

impl AnnotationRequest {
    pub fn new(prompt: impl Into<String>, frame_refs: Vec<String>, max_tokens: u32) -> Self {
        AnnotationRequest {
            prompt: prompt.into(),
            frame_refs,
            max_tokens,
            want_label_logits: false,
            route: None,
        }
    }

    pub fn with_route(mut self, route: RequestRoute) -> Self {
        self.route = Some(route);
        self
    }

    pub fn with_label_logits(mut self) -> Self {
        self.want_label_logits = true;
        self
    }

    /// Content hash used as the idempotency key; identical requests share it.
    pub fn content_key(&self) -> String {
        let wire = serde_json::to_vec(self).expect("request serializes");
        let route = serde_json::to_vec(&self.route).expect("route serializes");
        sha256_hex(&[wire, route].concat())
    }
}

/// Raw logits of the leading "Yes"/"No" label tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelLogits {
    pub yes: f64,
    pub no: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_logits: Option<LabelLogits>,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnnotatorError {
    #[error("request timed out after {after_ms} ms")]
    Timeout { after_ms: u64 },
    #[error("backend error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Backend { status: Option<u16>, message: String },
    #[error("rate limited{}", retry_after_ms.map(|ms| format!(", retry after {ms} ms")).unwrap_or_default())]
    RateLimited { retry_after_ms: Option<u64> },
    #[error("protocol error{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Protocol { status: Option<u16>, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl AnnotatorError {
    pub fn protocol(message: impl Into<String>) -> Self {
        AnnotatorError::Protocol {
            status: None,
            message: message.into(),
        }
    }

    /// Timeouts, connection failures and 5xx responses are worth retrying; 4xx are not.
    pub fn is_transient(&self) -> bool {
        match self {
            AnnotatorError::Timeout { .. } => true,
            AnnotatorError::Backend { status, .. } => status.is_none_or(|s| s >= 500),
            _ => false,
        }
    }
}

/// A model endpoint. Implementations must be safe to call concurrently.
pub trait Backend: Send + Sync {
    /// Stable identifier recorded in sample provenance.
    fn backend_id(&self) -> String;
    fn call(&self, request: &AnnotationRequest) -> Result<AnnotationResponse, AnnotatorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: u32,
    /// Scale each delay by a uniform factor in [0.5, 1].
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 200,
            factor: 4,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Un-jittered delay before retry number `retry` (0-based).
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        let factor = u64::from(self.factor).saturating_pow(retry);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor))
    }

    fn delay(&self, retry: u32) -> Duration {
        let nominal = self.nominal_delay(retry);
        if self.jitter {
            nominal.mul_f64(rand::random_range(0.5..=1.0))
        } else {
            nominal
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub max_tokens_ceiling: u32,
    /// Upper bound on concurrent backend calls and on batch parallelism.
    pub max_parallelism: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            max_tokens_ceiling: 2048,
            max_parallelism: 16,
            retry: RetryPolicy::default(),
        }
    }
}

struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

/// Shareable annotator client.
pub struct AnnotatorClient {
    backend: Arc<dyn Backend>,
    config: ClientConfig,
    permits: Permits,
    sleeper: Sleeper,
}

impl AnnotatorClient {
    pub fn new(backend: Arc<dyn Backend>, config: ClientConfig) -> Self {
        AnnotatorClient {
            backend,
            permits: Permits {
                free: Mutex::new(config.max_parallelism.max(1)),
                cv: Condvar::new(),
            },
            config,
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    /// Replaces the function used to wait between retries.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.backend_id()
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn check(&self, request: &AnnotationRequest) -> Result<(), AnnotatorError> {
        if request.prompt.trim().is_empty() {
            return Err(AnnotatorError::InvalidRequest("prompt is empty".into()));
        }
        if request.max_tokens == 0 || request.max_tokens > self.config.max_tokens_ceiling {
            return Err(AnnotatorError::InvalidRequest(format!(
                "max_tokens {} outside 1..={}",
                request.max_tokens, self.config.max_tokens_ceiling
            )));
        }
        Ok(())
    }

    /// Sends one request, retrying transient failures per the retry policy.
    pub fn annotate(&self, request: &AnnotationRequest) -> Result<AnnotationResponse, AnnotatorError> {
        self.check(request)?;
        let policy = self.config.retry;
        let mut retry = 0;
        loop {
            let result = {
                let _permit = self.permits.acquire();
                self.backend.call(request)
            };
            match result {
                Ok(mut response) => {
                    if !request.want_label_logits {
                        response.label_logits = None;
                    } else if let Some(l) = response.label_logits {
                        if !(l.yes.is_finite() && l.no.is_finite()) {
                            return Err(AnnotatorError::protocol("non-finite label logits"));
                        }
                    }
                    return Ok(response);
                }
                Err(e) if e.is_transient() && retry + 1 < policy.max_attempts => {
                    tracing::debug!(error = %e, retry, "retrying annotator request");
                    (self.sleeper)(policy.delay(retry));
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Sends `requests` with at most `parallelism` in flight. Results keep request order and
    /// failures are reported per item.
    pub fn annotate_batch(
        &self,
        requests: &[AnnotationRequest],
        parallelism: usize,
    ) -> Result<Vec<Result<AnnotationResponse, AnnotatorError>>, AnnotatorError> {
        if parallelism == 0 || parallelism > self.config.max_parallelism {
            return Err(AnnotatorError::InvalidRequest(format!(
                "parallelism {parallelism} outside 1..={}",
                self.config.max_parallelism
            )));
        }
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let workers = parallelism.min(requests.len());
        if workers == 1 {
            return Ok(requests.iter().map(|r| self.annotate(r)).collect());
        }
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<AnnotationResponse, AnnotatorError>>> =
            (0..requests.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    scope.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let i = next.fetch_add(1, Ordering::Relaxed);
                            if i >= requests.len() {
                                break;
                            }
                            done.push((i, self.annotate(&requests[i])));
                        }
                        done
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("annotator worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        Ok(slots.into_iter().map(|s| s.expect("every slot filled")).collect())
    }
}
