use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, BackendIdentity, FirstTokenBackend, TokenDistribution, MIN_TOP_K};
use crate::prompting::{LabelStyle, RenderedPrompt};

/// Environment variable holding the bearer token for the completion endpoint.
pub const API_KEY_ENV: &str = "MCQ_PROBE_API_KEY";

/// Exponential backoff: retry `n` waits `base_delay · 2^(n-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

/// Client for a completion-style JSON endpoint that reports top logprobs
/// for the generated token.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    identity: BackendIdentity,
    api_key: Option<String>,
    retry: RetryPolicy,
}

impl HttpBackend {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        label_style: LabelStyle,
        api_key: Option<String>,
        retry: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        Ok(HttpBackend {
            client,
            identity: BackendIdentity {
                model: model.into(),
                endpoint: endpoint.into(),
                label_style,
            },
            api_key,
            retry,
        })
    }

    fn request_once(&self, prompt: &str, top_k: usize) -> Result<TokenDistribution, BackendError> {
        let body = json!({
            "model": self.identity.model,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": top_k,
            "top_logprobs": top_k,
        });
        let mut req = self.client.post(&self.identity.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body: text.chars().take(500).collect(),
            });
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Malformed(format!("invalid JSON: {e}")))?;
        parse_completion_response(&value, top_k)
    }
}

impl FirstTokenBackend for HttpBackend {
    fn identity(&self) -> &BackendIdentity {
        &self.identity
    }

    fn query_first_token(
        &self,
        prompt: &RenderedPrompt,
        top_k: usize,
    ) -> Result<TokenDistribution, BackendError> {
        if top_k < MIN_TOP_K {
            return Err(BackendError::InvalidTopK(top_k));
        }
        let mut retry = 0;
        loop {
            match self.request_once(&prompt.text, top_k) {
                Err(e) if e.is_transient() && retry < self.retry.max_retries => {
                    retry += 1;
                    thread::sleep(self.retry.delay(retry));
                }
                other => return other,
            }
        }
    }
}

/// Extracts the first generated token's top logprobs from a completion
/// response and exponentiates them. Accepts the legacy completions layout
/// (`logprobs.top_logprobs[0]` as a token→logprob map or list) and the
/// chat layout (`logprobs.content[0].top_logprobs`).
pub fn parse_completion_response(
    value: &Value,
    top_k: usize,
) -> Result<TokenDistribution, BackendError> {
    let choice = value
        .get("choices")
        .and_then(Value::as_array)
        .and_then(|c| c.first())
        .ok_or_else(|| BackendError::Malformed("response has no choices".into()))?;
    let logprobs = match choice.get("logprobs") {
        None | Some(Value::Null) => return Err(BackendError::LogprobsUnsupported),
        Some(l) => l,
    };
    let first = if let Some(content) = logprobs.get("content").filter(|c| !c.is_null()) {
        content
            .as_array()
            .and_then(|c| c.first())
            .and_then(|t| t.get("top_logprobs"))
    } else {
        logprobs
            .get("top_logprobs")
            .and_then(Value::as_array)
            .and_then(|t| t.first())
    };
    let first = match first {
        None | Some(Value::Null) => return Err(BackendError::LogprobsUnsupported),
        Some(f) => f,
    };

    let to_prob = |token: &str, lp: &Value| -> Result<(String, f64), BackendError> {
        let lp = lp.as_f64().ok_or_else(|| {
            BackendError::Malformed(format!("logprob for {token:?} is not a number"))
        })?;
        Ok((token.to_string(), lp.exp().min(1.0)))
    };
    let entries = match first {
        Value::Object(map) => map
            .iter()
            .map(|(tok, lp)| to_prob(tok, lp))
            .collect::<Result<Vec<_>, _>>()?,
        Value::Array(items) => items
            .iter()
            .map(|item| {
                let tok = item.get("token").and_then(Value::as_str).ok_or_else(|| {
                    BackendError::Malformed("top_logprobs entry without token".into())
                })?;
                to_prob(tok, item.get("logprob").unwrap_or(&Value::Null))
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => {
            return Err(BackendError::Malformed(
                "unexpected top_logprobs shape".into(),
            ))
        }
    };
    if entries.is_empty() {
        return Err(BackendError::LogprobsUnsupported);
    }
    TokenDistribution::new(entries, top_k)
}
