//! Text-generation backends. Every agent obtains completions through
//! [`Backend::complete`]; greedy decoding is a request with temperature 0.

mod http;
mod scripted;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig};
pub use scripted::{fixture_key, prompt_digest, Fixture, FixtureEntry, ScriptedBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub n: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

pub const DEFAULT_MAX_NEW_TOKENS: usize = 1024;

impl GenerationRequest {
    pub fn new(
        prompt: impl Into<String>,
        n: usize,
        temperature: f64,
    ) -> Result<Self, BackendError> {
        if n == 0 {
            return Err(BackendError::InvalidRequest("n must be at least 1".into()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "bad temperature {temperature}"
            )));
        }
        if temperature == 0.0 && n != 1 {
            return Err(BackendError::InvalidRequest(
                "greedy requests must have n = 1".into(),
            ));
        }
        Ok(Self {
            prompt: prompt.into(),
            n,
            temperature,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            stop: None,
        })
    }

    pub fn greedy(prompt: impl Into<String>) -> Self {
        Self::new(prompt, 1, 0.0).expect("greedy request is always valid")
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub completions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<Vec<TokenLogprob>>>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed backend reply: {0}")]
    Malformed(String),
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no scripted response for key {key} (prompt digest {digest})")]
    FixtureMiss { key: String, digest: String },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError>;
}

pub type BackendHandle = Arc<dyn Backend>;

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (**self).complete(request)
    }
}

/// Bounded retries with exponential backoff for transport failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn run<T>(
        &self,
        mut attempt: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut tries = 0;
        loop {
            match attempt() {
                Err(e) if e.is_retryable() && tries < self.max_retries => {
                    let delay = self.base_delay_ms.saturating_mul(1 << tries.min(16));
                    log::warn!("retrying after {e} (attempt {})", tries + 1);
                    std::thread::sleep(Duration::from_millis(delay));
                    tries += 1;
                }
                other => return other,
            }
        }
    }
}

/// Checks the completion count of a result against the request.
pub(crate) fn check_count(
    req: &GenerationRequest,
    res: &GenerationResult,
) -> Result<(), BackendError> {
    if res.completions.len() != req.n {
        return Err(BackendError::Malformed(format!(
            "expected {} completions, got {}",
            req.n,
            res.completions.len()
        )));
    }
    Ok(())
}

/// Wraps a backend and counts `complete` calls.
pub struct CountingBackend {
    inner: BackendHandle,
    calls: AtomicUsize,
}

impl CountingBackend {
    pub fn new(inner: BackendHandle) -> Arc<Self> {
        Arc::new(Self {
            inner,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for CountingBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

/// Backend driven by a closure.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&GenerationRequest) -> Result<GenerationResult, BackendError> + Send + Sync,
{
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        (self.0)(request)
    }
}

/// A backend answering every request with `n` copies of one text.
pub fn constant_backend(text: impl Into<String>) -> BackendHandle {
    let text = text.into();
    Arc::new(FnBackend(move |req: &GenerationRequest| {
        Ok(GenerationResult {
            completions: vec![text.clone(); req.n],
            token_logprobs: None,
        })
    }))
}
