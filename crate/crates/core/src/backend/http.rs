//! OpenAI-compatible `/completions` client.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    check_count, Backend, BackendError, GenerationRequest, GenerationResult, RetryPolicy,
    TokenLogprob,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full endpoint URL, e.g. `http://localhost:8000/v1/completions`.
    pub url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Ask for per-token log-probabilities.
    #[serde(default)]
    pub logprobs: bool,
}

fn default_timeout() -> f64 {
    120.0
}

impl HttpConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            timeout_secs: default_timeout(),
            retry: RetryPolicy::default(),
            logprobs: false,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    n: usize,
    temperature: f64,
    max_tokens: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<&'a [String]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    index: usize,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(
                config.timeout_secs.max(0.001),
            )))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self { config, agent }
    }

    fn attempt(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        let body = WireRequest {
            model: &self.config.model,
            prompt: &req.prompt,
            n: req.n,
            temperature: req.temperature,
            max_tokens: req.max_new_tokens,
            stop: req.stop.as_deref(),
            logprobs: self.config.logprobs.then_some(1),
        };
        let mut call = self.agent.post(&self.config.url);
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(BackendError::Transport(format!("HTTP {status}")));
        }
        if status >= 400 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Rejected(format!("HTTP {status}: {text}")));
        }
        let reply: WireReply = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        let mut choices = reply.choices;
        choices.sort_by_key(|c| c.index);
        let logprobs = if choices.iter().all(|c| c.logprobs.is_some()) && !choices.is_empty() {
            Some(
                choices
                    .iter()
                    .map(|c| {
                        let lp = c.logprobs.as_ref().expect("checked above");
                        lp.tokens
                            .iter()
                            .zip(&lp.token_logprobs)
                            .map(|(t, p)| TokenLogprob {
                                token: t.clone(),
                                logprob: p.unwrap_or(0.0),
                            })
                            .collect()
                    })
                    .collect(),
            )
        } else {
            None
        };
        let result = GenerationResult {
            completions: choices.into_iter().map(|c| c.text).collect(),
            token_logprobs: logprobs,
        };
        check_count(req, &result)?;
        Ok(result)
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        self.config.retry.run(|| self.attempt(request))
    }
}
