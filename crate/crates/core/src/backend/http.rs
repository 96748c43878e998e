use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{
    ChatRequest, ChatResponse, CompletionRequest, CompletionResponse, CAPABILITIES_PATH, CHAT_PATH, COMPLETIONS_PATH,
};
use super::{
    check_greedy, sample_id, BackendError, ChatMessage, ChatParams, ChatProvider, LogitProvider, Prompt,
    ProviderCapabilities,
};
use crate::scoring::{SampledTrace, TokenTrace};
use crate::token::Token;

#[derive(Debug, Clone)]
pub struct HttpOptions {
    /// Retries after the first attempt on transport errors and 5xx replies.
    pub max_retries: usize,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for HttpOptions {
    fn default() -> Self {
        HttpOptions {
            max_retries: 3,
            initial_backoff: Duration::from_millis(250),
            timeout: Duration::from_secs(120),
        }
    }
}

/// Client for the completions-style wire contract in [`super::wire`].
pub struct HttpBackend {
    base: String,
    agent: ureq::Agent,
    api_key: Option<String>,
    options: HttpOptions,
    caps: ProviderCapabilities,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("base", &self.base)
            .field("caps", &self.caps)
            .finish_non_exhaustive()
    }
}

const BODY_EXCERPT: usize = 200;

impl HttpBackend {
    /// Connects and fetches the provider's capability report.
    pub fn connect(endpoint: &str, api_key: Option<String>, options: HttpOptions) -> Result<Self, BackendError> {
        let agent = ureq::AgentBuilder::new().timeout(options.timeout).build();
        let mut backend = HttpBackend {
            base: endpoint.trim_end_matches('/').to_string(),
            agent,
            api_key,
            options,
            caps: ProviderCapabilities {
                max_top_k: 0,
                supports_teacher_forcing: false,
                supports_sampling: false,
                supports_chat: false,
            },
        };
        backend.caps = backend.request::<(), ProviderCapabilities>("GET", CAPABILITIES_PATH, None)?;
        Ok(backend)
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    fn request<B: Serialize, R: DeserializeOwned>(&self, method: &str, path: &str, body: Option<&B>) -> Result<R, BackendError> {
        let url = format!("{}{path}", self.base);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = self.agent.request(method, &url);
            if let Some(key) = &self.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            let result = match body {
                Some(b) => req.send_json(b),
                None => req.call(),
            };
            let retry = attempt <= self.options.max_retries;
            match result {
                Ok(resp) => return resp.into_json::<R>().map_err(BackendError::protocol),
                Err(ureq::Error::Status(status, resp)) => {
                    let body: String = resp
                        .into_string()
                        .unwrap_or_default()
                        .chars()
                        .take(BODY_EXCERPT)
                        .collect();
                    if status >= 500 && retry {
                        log::warn!("{url}: HTTP {status} (attempt {attempt}), retrying");
                    } else {
                        return Err(BackendError::Status { status, body });
                    }
                }
                Err(ureq::Error::Transport(t)) => {
                    if !retry {
                        return Err(BackendError::Transport {
                            attempts: attempt,
                            message: t.to_string(),
                        });
                    }
                    log::warn!("{url}: {t} (attempt {attempt}), retrying");
                }
            }
            thread::sleep(self.options.initial_backoff * 2u32.pow((attempt - 1) as u32));
        }
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let resp: CompletionResponse = self.request("POST", COMPLETIONS_PATH, Some(req))?;
        if resp.choices.is_empty() {
            return Err(BackendError::Protocol("completion response has no choices".into()));
        }
        Ok(resp)
    }

    fn base_request(&self, prompt: &Prompt, k: usize) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.text.clone(),
            max_tokens: 0,
            temperature: 0.0,
            top_logprobs: self.caps.effective_k(k),
            continuation: None,
            n: 1,
            seed: None,
            query_id: Some(prompt.query_id.clone()),
            variant_index: prompt.variant_index,
        }
    }
}

impl LogitProvider for HttpBackend {
    fn capabilities(&self) -> ProviderCapabilities {
        self.caps
    }

    fn generate_greedy(&self, prompt: &Prompt, max_tokens: usize, k: usize) -> Result<TokenTrace<f64>, BackendError> {
        if max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        let req = CompletionRequest {
            max_tokens,
            ..self.base_request(prompt, k)
        };
        let resp = self.complete(&req)?;
        let trace = resp.choices[0].to_trace(&prompt.variant_id(), req.top_logprobs)?;
        check_greedy(&trace)?;
        Ok(trace)
    }

    fn score_teacher_forced(&self, prompt: &Prompt, response: &[Token], k: usize) -> Result<TokenTrace<f64>, BackendError> {
        self.caps.require_teacher_forcing()?;
        if response.is_empty() {
            return Err(BackendError::InvalidRequest("empty continuation".into()));
        }
        let req = CompletionRequest {
            continuation: Some(response.to_vec()),
            ..self.base_request(prompt, k)
        };
        let resp = self.complete(&req)?;
        let got = resp.choices[0].tokens.len();
        if got != response.len() {
            return Err(BackendError::TraceAlignment {
                expected: response.len(),
                actual: got,
            });
        }
        let trace = resp.choices[0].to_trace(&prompt.variant_id(), req.top_logprobs)?;
        // Keep the caller's tokens: the identity rule may have matched an id
        // against a differently spelled string.
        Ok(TokenTrace::new(trace.prompt_ref(), response.to_vec(), trace.positions().to_vec())?)
    }

    fn sample_responses(
        &self,
        prompt: &Prompt,
        n: usize,
        temperature: f64,
        max_tokens: usize,
        k: usize,
        seed: u64,
    ) -> Result<Vec<SampledTrace<f64>>, BackendError> {
        self.caps.require_sampling()?;
        if !(temperature > 0.0) {
            return Err(BackendError::InvalidRequest("temperature must be positive".into()));
        }
        let req = CompletionRequest {
            max_tokens,
            temperature,
            n,
            seed: Some(seed),
            ..self.base_request(prompt, k)
        };
        let resp = self.complete(&req)?;
        if resp.choices.len() != n {
            return Err(BackendError::Protocol(format!(
                "asked for {n} samples, got {}",
                resp.choices.len()
            )));
        }
        resp.choices
            .iter()
            .enumerate()
            .map(|(i, c)| c.to_sample(&sample_id(i), req.top_logprobs))
            .collect()
    }
}

impl ChatProvider for HttpBackend {
    fn chat(&self, messages: &[ChatMessage], params: &ChatParams) -> Result<String, BackendError> {
        if !self.caps.supports_chat {
            return Err(BackendError::Capability("provider has no chat endpoint".into()));
        }
        let req = ChatRequest {
            messages: messages.to_vec(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        };
        let resp: ChatResponse = self.request("POST", CHAT_PATH, Some(&req))?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol("chat response has no choices".into()))
    }
}
