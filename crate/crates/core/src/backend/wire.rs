//! JSON bodies of the HTTP provider contract.
//!
//! | method | path                   | request             | response              |
//! |--------|------------------------|---------------------|-----------------------|
//! | GET    | `/v1/capabilities`     |                     | [`ProviderCapabilities`] |
//! | POST   | `/v1/completions`      | [`CompletionRequest`] | [`CompletionResponse`] |
//! | POST   | `/v1/chat/completions` | [`ChatRequest`]     | [`ChatResponse`]      |
//!
//! A completion request without `continuation` generates: greedily when
//! `temperature` is 0, otherwise `n` samples. With `continuation` it scores
//! the supplied tokens and returns exactly one entry per continuation token.
//!
//! [`ProviderCapabilities`]: super::ProviderCapabilities

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatMessage};
use crate::metrics::truncate_topk;
use crate::scoring::{SampledTrace, TokenTrace};
use crate::token::Token;

pub const CAPABILITIES_PATH: &str = "/v1/capabilities";
pub const COMPLETIONS_PATH: &str = "/v1/completions";
pub const CHAT_PATH: &str = "/v1/chat/completions";

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    #[serde(default)]
    pub max_tokens: usize,
    #[serde(default)]
    pub temperature: f64,
    pub top_logprobs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation: Option<Vec<Token>>,
    #[serde(default = "one")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Opaque request metadata; servers may ignore it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: Token,
    pub logprob: f64,
}

/// One position: the emitted (or supplied) token and the top alternatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprobs {
    pub token: Token,
    pub logprob: f64,
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub tokens: Vec<TokenLogprobs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub choices: Vec<Choice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChatMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl Choice {
    pub fn from_trace(trace: &TokenTrace<f64>, chosen_logprobs: Option<&[f64]>) -> Self {
        let tokens = trace
            .response_tokens()
            .iter()
            .zip(trace.positions())
            .enumerate()
            .map(|(t, (tok, pos))| {
                let logprob = match chosen_logprobs {
                    Some(lps) => lps[t],
                    None => pos
                        .entries()
                        .iter()
                        .find(|(x, _)| x == tok)
                        .map(|(_, l)| *l)
                        .unwrap_or(f64::MIN),
                };
                TokenLogprobs {
                    token: tok.clone(),
                    logprob,
                    top_logprobs: pos
                        .entries()
                        .iter()
                        .map(|(token, logprob)| TopLogprob { token: token.clone(), logprob: *logprob })
                        .collect(),
                }
            })
            .collect();
        Choice { tokens }
    }

    pub fn from_sample(sample: &SampledTrace<f64>) -> Self {
        Self::from_trace(&sample.trace, Some(&sample.chosen_logprobs))
    }

    pub fn to_trace(&self, prompt_ref: &str, k: usize) -> Result<TokenTrace<f64>, BackendError> {
        let positions = self
            .tokens
            .iter()
            .map(|p| {
                truncate_topk(p.top_logprobs.iter().map(|e| (e.token.clone(), e.logprob)), k)
                    .map_err(BackendError::protocol)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let tokens = self.tokens.iter().map(|p| p.token.clone()).collect();
        Ok(TokenTrace::new(prompt_ref, tokens, positions)?)
    }

    pub fn to_sample(&self, prompt_ref: &str, k: usize) -> Result<SampledTrace<f64>, BackendError> {
        Ok(SampledTrace {
            trace: self.to_trace(prompt_ref, k)?,
            chosen_logprobs: self.tokens.iter().map(|p| p.logprob).collect(),
        })
    }
}
