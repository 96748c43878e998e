//! Logit providers.
//!
//! A provider produces per-position top-k distributions for greedy
//! generations, for a supplied continuation (teacher forcing) and for
//! temperature samples. Three implementations ship: an HTTP client for a
//! completions-style endpoint, a replay backend over recorded trace files and
//! a deterministic mock language model.

mod http;
mod mock;
mod replay;
mod stub;
mod trace_io;
pub mod wire;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{SampledTrace, ScoringError, TokenTrace};
use crate::token::Token;

pub use http::{HttpBackend, HttpOptions};
pub use mock::{enumerate_sequences, MockChat, MockLM, MockQuery, SequenceModel, MAX_ENUMERATION};
pub use replay::ReplayBackend;
pub use stub::{StubOptions, StubServer};
pub use trace_io::{read_trace, write_trace, TraceRecord};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("capability: {0}")]
    Capability(String),
    #[error("trace alignment: expected {expected} positions, provider returned {actual}")]
    TraceAlignment { expected: usize, actual: usize },
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no recorded trace for {0}")]
    NotFound(String),
    #[error("enumeration of {vocab}^{len} sequences exceeds the limit")]
    EnumerationTooLarge { vocab: usize, len: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {reason}")]
    Parse { path: String, offset: usize, reason: String },
    #[error(transparent)]
    Trace(#[from] ScoringError),
}

impl BackendError {
    pub(crate) fn protocol(e: impl std::fmt::Display) -> Self {
        BackendError::Protocol(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderCapabilities {
    pub max_top_k: usize,
    pub supports_teacher_forcing: bool,
    pub supports_sampling: bool,
    pub supports_chat: bool,
}

impl ProviderCapabilities {
    /// Top-k actually requested: `k`, clamped to what the provider offers.
    pub fn effective_k(&self, k: usize) -> usize {
        if k > self.max_top_k {
            log::warn!(
                "provider returns at most {} logits per position; clamping k={k}",
                self.max_top_k
            );
            self.max_top_k
        } else {
            k
        }
    }

    /// The scoring pipeline needs to score a supplied continuation.
    pub fn require_teacher_forcing(&self) -> Result<(), BackendError> {
        if self.supports_teacher_forcing {
            Ok(())
        } else {
            Err(BackendError::Capability(format!(
                "provider cannot score a supplied continuation (capabilities: {self:?})"
            )))
        }
    }

    pub fn require_sampling(&self) -> Result<(), BackendError> {
        if self.supports_sampling {
            Ok(())
        } else {
            Err(BackendError::Capability(format!(
                "provider cannot sample (capabilities: {self:?})"
            )))
        }
    }
}

/// Prompt text plus the identity of the query and variant it came from.
///
/// The identity is forwarded to providers as opaque metadata; the replay
/// and mock backends key on it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Prompt {
    pub text: String,
    pub query_id: String,
    pub variant_index: Option<usize>,
}

impl Prompt {
    pub fn original(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Prompt {
            text: text.into(),
            query_id: query_id.into(),
            variant_index: None,
        }
    }

    pub fn variant(query_id: impl Into<String>, index: usize, text: impl Into<String>) -> Self {
        Prompt {
            text: text.into(),
            query_id: query_id.into(),
            variant_index: Some(index),
        }
    }

    /// `original` or `v<index>`.
    pub fn variant_id(&self) -> String {
        match self.variant_index {
            None => ORIGINAL.to_string(),
            Some(i) => format!("v{i}"),
        }
    }
}

pub const ORIGINAL: &str = "original";

pub fn sample_id(index: usize) -> String {
    format!("s{index}")
}

pub trait LogitProvider: Send + Sync {
    fn capabilities(&self) -> ProviderCapabilities;

    /// Argmax decoding until end-of-sequence or `max_tokens`.
    fn generate_greedy(&self, prompt: &Prompt, max_tokens: usize, k: usize) -> Result<TokenTrace<f64>, BackendError>;

    /// Distributions at every position of `response` conditioned on the
    /// prompt and the response prefix.
    fn score_teacher_forced(&self, prompt: &Prompt, response: &[Token], k: usize) -> Result<TokenTrace<f64>, BackendError>;

    /// `n` independent temperature samples.
    fn sample_responses(
        &self,
        prompt: &Prompt,
        n: usize,
        temperature: f64,
        max_tokens: usize,
        k: usize,
        seed: u64,
    ) -> Result<Vec<SampledTrace<f64>>, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for ChatParams {
    fn default() -> Self {
        ChatParams {
            temperature: 1.0,
            max_tokens: 512,
        }
    }
}

pub trait ChatProvider: Send + Sync {
    fn chat(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, BackendError>;
}

/// Checks the greedy contract: every chosen token is a top-1 entry.
pub fn check_greedy(trace: &TokenTrace<f64>) -> Result<(), BackendError> {
    for (t, (tok, pos)) in trace.response_tokens().iter().zip(trace.positions()).enumerate() {
        let best = pos.entries()[0].1;
        let chosen = pos.entries().iter().find(|(x, _)| x == tok).map(|(_, l)| *l);
        if chosen != Some(best) {
            return Err(BackendError::Protocol(format!(
                "greedy token {tok} at position {t} is not an argmax of its distribution"
            )));
        }
    }
    Ok(())
}
