//! First-token probability sources and the probing pipeline that fills the
//! on-disk cache.

mod cache;
mod http;
mod mock;
mod probe;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{LabelStyle, Phrasing, RenderedPrompt};

pub use cache::{CacheError, ProbeCache, ProbeKey};
pub use http::{parse_completion_response, HttpBackend, RetryPolicy, API_KEY_ENV};
pub use mock::{mock_query, MockBackend, MockModelSpec, FILLER_TOKENS};
pub use probe::{run_probe, ProbeFailure, ProbeOptions, ProbeSummary};

/// Smallest `top_k` that still captures the letter variants.
pub const MIN_TOP_K: usize = 6;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("logprobs unsupported by endpoint")]
    LogprobsUnsupported,
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("unknown question id `{0}`")]
    UnknownQuestion(String),
    #[error("top_k must be at least {MIN_TOP_K}, got {0}")]
    InvalidTopK(usize),
    #[error("invalid mock spec: {0}")]
    InvalidSpec(String),
}

impl BackendError {
    /// Failures worth retrying: connection trouble, rate limits and 5xx.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Network(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    pub prob: f64,
}

/// Top-k first-token candidates, most probable first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub entries: Vec<TokenProb>,
    pub top_k: usize,
}

impl TokenDistribution {
    /// Sorts by probability (descending, ties by token text), keeps the most
    /// probable entry for duplicated tokens and truncates to `top_k`.
    pub fn new(
        entries: impl IntoIterator<Item = (String, f64)>,
        top_k: usize,
    ) -> Result<Self, BackendError> {
        let mut entries: Vec<TokenProb> = entries
            .into_iter()
            .map(|(token, prob)| TokenProb { token, prob })
            .collect();
        if let Some(bad) = entries
            .iter()
            .find(|e| !(0.0..=1.0).contains(&e.prob) || e.prob.is_nan())
        {
            return Err(BackendError::Malformed(format!(
                "probability {} for token {:?} outside [0, 1]",
                bad.prob, bad.token
            )));
        }
        entries.sort_by(|a, b| {
            b.prob
                .total_cmp(&a.prob)
                .then_with(|| a.token.cmp(&b.token))
        });
        let mut seen = std::collections::HashSet::new();
        entries.retain(|e| seen.insert(e.token.clone()));
        entries.truncate(top_k);
        Ok(TokenDistribution { entries, top_k })
    }

    pub fn prob_of(&self, token: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.token == token)
            .map(|e| e.prob)
    }
}

/// What produced a probe: model, endpoint and the label glyphs in the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub model: String,
    pub endpoint: String,
    pub label_style: LabelStyle,
}

impl BackendIdentity {
    /// Filesystem-safe name for report directories.
    pub fn slug(&self) -> String {
        let s: String = self
            .model
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        if s.is_empty() {
            "backend".into()
        } else {
            s
        }
    }
}

impl fmt::Display for BackendIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} @ {} [{}]",
            self.model, self.endpoint, self.label_style
        )
    }
}

/// Raw probe of one question under one phrasing: one distribution per
/// permutation, indexed by permutation id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProbe")]
pub struct ChoiceProbe {
    pub question_id: String,
    pub phrasing: Phrasing,
    pub backend: BackendIdentity,
    pub distributions: Vec<TokenDistribution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Deserialize)]
struct RawProbe {
    question_id: String,
    phrasing: Phrasing,
    backend: BackendIdentity,
    distributions: Vec<TokenDistribution>,
    #[serde(default)]
    timestamp: Option<String>,
}

impl TryFrom<RawProbe> for ChoiceProbe {
    type Error = String;

    fn try_from(raw: RawProbe) -> Result<Self, Self::Error> {
        if raw.distributions.len() != 6 {
            return Err(format!(
                "probe for `{}` has {} distributions, expected 6",
                raw.question_id,
                raw.distributions.len()
            ));
        }
        Ok(ChoiceProbe {
            question_id: raw.question_id,
            phrasing: raw.phrasing,
            backend: raw.backend,
            distributions: raw.distributions,
            timestamp: raw.timestamp,
        })
    }
}

impl ChoiceProbe {
    pub fn key(&self) -> ProbeKey {
        ProbeKey {
            question_id: self.question_id.clone(),
            phrasing: self.phrasing,
            backend: self.backend.clone(),
        }
    }
}

/// Anything that can return first-token candidates for a rendered prompt.
pub trait FirstTokenBackend: Send + Sync {
    fn identity(&self) -> &BackendIdentity;

    fn query_first_token(
        &self,
        prompt: &RenderedPrompt,
        top_k: usize,
    ) -> Result<TokenDistribution, BackendError>;

    /// Whether probes should carry a wall-clock timestamp. Deterministic
    /// backends leave it off so their caches are reproducible byte for byte.
    fn timestamps_probes(&self) -> bool {
        true
    }
}
