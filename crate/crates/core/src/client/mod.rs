//! Chat-completion backends, retries and bounded-parallelism dispatch.

pub mod http;

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mutation::PresentedQuestion;
use crate::sampling::DecodingProfile;

pub use http::{HttpBackend, HttpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Simulator,
}

/// Draw metadata for backends that need the structured question rather than
/// the prompt text. The HTTP backend ignores it.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawContext {
    pub question_id: String,
    pub presented: PresentedQuestion,
    /// The stem shown was a paraphrase.
    pub paraphrased: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt_text: String,
    pub profile: DecodingProfile,
    pub max_tokens: u32,
    pub request_id: String,
    pub draw: Option<DrawContext>,
}

impl CompletionRequest {
    pub fn new(
        request_id: impl Into<String>,
        prompt_text: impl Into<String>,
        profile: DecodingProfile,
    ) -> Self {
        CompletionRequest {
            prompt_text: prompt_text.into(),
            profile,
            max_tokens: 512,
            request_id: request_id.into(),
            draw: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResponse {
    pub text: String,
    pub first_token_probability: Option<f64>,
    pub backend: BackendKind,
    pub latency: Duration,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: timeouts, rate limits, server errors.
    #[error("transient backend failure: {0}")]
    Transient(String),
    /// Authentication or configuration problems; the run must stop.
    #[error("fatal backend failure: {0}")]
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request {request_id}: {message}")]
    Aborted { request_id: String, message: String },
    #[error("concurrency must be at least 1")]
    ZeroConcurrency,
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;

    /// Human-readable identity for run manifests.
    fn identity(&self) -> String;

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
    fn identity(&self) -> String {
        (**self).identity()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(req)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Delay before attempt `attempt + 1` (attempt counts from 1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(20);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DrawOutcome {
    Completed {
        response: CompletionResponse,
        attempts: u32,
    },
    /// Retries exhausted; the draw is recorded as failed.
    Failed { attempts: u32, error: String },
}

/// Runs `req` with exponential backoff on transient failures. Fatal errors
/// are returned as `Err`.
pub fn complete_with_retry<B: Backend + ?Sized>(
    backend: &B,
    req: &CompletionRequest,
    policy: &RetryPolicy,
) -> Result<DrawOutcome, ClientError> {
    let max = policy.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        match backend.complete(req) {
            Ok(response) => {
                return Ok(DrawOutcome::Completed {
                    response,
                    attempts: attempt,
                })
            }
            Err(BackendError::Fatal(message)) => {
                return Err(ClientError::Aborted {
                    request_id: req.request_id.clone(),
                    message,
                })
            }
            Err(BackendError::Transient(error)) => {
                if attempt >= max {
                    log::warn!(
                        "request {} failed after {attempt} attempts: {error}",
                        req.request_id
                    );
                    return Ok(DrawOutcome::Failed {
                        attempts: attempt,
                        error,
                    });
                }
                let delay = policy.backoff(attempt);
                log::debug!(
                    "request {} attempt {attempt} failed ({error}); retrying in {delay:?}",
                    req.request_id
                );
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

/// Executes `requests` on at most `concurrency` worker threads. `sink` is
/// called on the calling thread with `(position in requests, outcome)` in
/// completion order. A fatal error stops new dispatch, waits for in-flight
/// requests, and is returned.
pub fn dispatch<B, F>(
    backend: &B,
    requests: &[CompletionRequest],
    concurrency: usize,
    policy: &RetryPolicy,
    mut sink: F,
) -> Result<(), ClientError>
where
    B: Backend + ?Sized,
    F: FnMut(usize, DrawOutcome),
{
    if concurrency == 0 {
        return Err(ClientError::ZeroConcurrency);
    }
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<DrawOutcome, ClientError>)>();
    let mut fatal = None;
    std::thread::scope(|scope| {
        for _ in 0..concurrency.min(requests.len()) {
            let tx = tx.clone();
            let (next, abort) = (&next, &abort);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(i) else { break };
                let outcome = complete_with_retry(backend, req, policy);
                if outcome.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, outcome) in rx {
            match outcome {
                Ok(o) => sink(i, o),
                Err(e) => {
                    if fatal.is_none() {
                        fatal = Some(e);
                    }
                }
            }
        }
    });
    match fatal {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
