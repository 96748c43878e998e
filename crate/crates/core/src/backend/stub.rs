//! In-process HTTP server implementing the wire contract on top of any
//! [`LogitProvider`]. Used for conformance tests and offline demos.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::{
    ChatChoice, ChatRequest, ChatResponse, Choice, CompletionRequest, CompletionResponse, ErrorBody,
    CAPABILITIES_PATH, CHAT_PATH, COMPLETIONS_PATH,
};
use super::{BackendError, ChatMessage, ChatParams, ChatProvider, LogitProvider, Prompt, ProviderCapabilities};

#[derive(Clone, Default)]
pub struct StubOptions {
    /// Advertise and serve continuation scoring.
    pub teacher_forcing: bool,
    pub chat: Option<Arc<dyn ChatProvider>>,
    /// Answer this many initial requests with 503.
    pub fail_first: usize,
    /// Bearer token required on every request, if set.
    pub bearer: Option<String>,
    pub workers: usize,
}

impl StubOptions {
    pub fn new() -> Self {
        StubOptions {
            teacher_forcing: true,
            workers: 4,
            ..Default::default()
        }
    }
}

pub struct StubServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    requests: Arc<AtomicUsize>,
    threads: Vec<JoinHandle<()>>,
}

struct Shared {
    provider: Arc<dyn LogitProvider>,
    options: StubOptions,
    requests: Arc<AtomicUsize>,
}

impl StubServer {
    /// Binds to `addr` (use port 0 for an ephemeral port) and starts serving.
    pub fn start(addr: &str, provider: Arc<dyn LogitProvider>, options: StubOptions) -> std::io::Result<Self> {
        let server = Server::http(addr).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("stub server is not bound to an IP address"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let shared = Arc::new(Shared {
            provider,
            options: options.clone(),
            requests: requests.clone(),
        });
        let threads = (0..options.workers.max(1))
            .map(|_| {
                let server = server.clone();
                let stop = stop.clone();
                let shared = shared.clone();
                thread::spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        match server.recv_timeout(Duration::from_millis(50)) {
                            Ok(Some(req)) => shared.handle(req),
                            Ok(None) => {}
                            Err(_) => break,
                        }
                    }
                })
            })
            .collect();
        Ok(StubServer {
            addr,
            stop,
            requests,
            threads,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Requests received so far, including rejected ones.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Blocks until the server is stopped from another thread.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn json<T: Serialize>(status: u16, body: &T) -> Response<std::io::Cursor<Vec<u8>>> {
    let bytes = serde_json::to_vec(body).expect("response serializes");
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

fn error(status: u16, msg: impl Into<String>) -> Response<std::io::Cursor<Vec<u8>>> {
    json(status, &ErrorBody { error: msg.into() })
}

fn status_for(e: &BackendError) -> u16 {
    match e {
        BackendError::InvalidRequest(_) | BackendError::Trace(_) => 400,
        BackendError::NotFound(_) => 404,
        BackendError::Capability(_) => 501,
        _ => 500,
    }
}

impl Shared {
    fn handle(&self, mut req: Request) {
        let n = self.requests.fetch_add(1, Ordering::SeqCst);
        let resp = if n < self.options.fail_first {
            error(503, "warming up")
        } else if !self.authorized(&req) {
            error(401, "missing or wrong bearer token")
        } else {
            let mut body = String::new();
            match req.as_reader().read_to_string(&mut body) {
                Ok(_) => self.route(req.method(), req.url(), &body),
                Err(e) => error(400, e.to_string()),
            }
        };
        let _ = req.respond(resp);
    }

    fn authorized(&self, req: &Request) -> bool {
        let Some(token) = &self.options.bearer else {
            return true;
        };
        let want = format!("Bearer {token}");
        req.headers()
            .iter()
            .any(|h| h.field.equiv("Authorization") && h.value.as_str() == want)
    }

    fn capabilities(&self) -> ProviderCapabilities {
        let inner = self.provider.capabilities();
        ProviderCapabilities {
            supports_teacher_forcing: inner.supports_teacher_forcing && self.options.teacher_forcing,
            supports_chat: self.options.chat.is_some(),
            ..inner
        }
    }

    fn route(&self, method: &Method, url: &str, body: &str) -> Response<std::io::Cursor<Vec<u8>>> {
        match (method, url) {
            (Method::Get, CAPABILITIES_PATH) => json(200, &self.capabilities()),
            (Method::Post, COMPLETIONS_PATH) => match serde_json::from_str::<CompletionRequest>(body) {
                Ok(r) => match self.complete(&r) {
                    Ok(resp) => json(200, &resp),
                    Err(e) => error(status_for(&e), e.to_string()),
                },
                Err(e) => error(400, e.to_string()),
            },
            (Method::Post, CHAT_PATH) => match (&self.options.chat, serde_json::from_str::<ChatRequest>(body)) {
                (None, _) => error(404, "chat not available"),
                (Some(_), Err(e)) => error(400, e.to_string()),
                (Some(chat), Ok(r)) => {
                    let params = ChatParams {
                        temperature: r.temperature,
                        max_tokens: r.max_tokens,
                    };
                    match chat.chat(&r.messages, &params) {
                        Ok(content) => json(
                            200,
                            &ChatResponse {
                                choices: vec![ChatChoice {
                                    message: ChatMessage {
                                        role: "assistant".into(),
                                        content,
                                    },
                                }],
                            },
                        ),
                        Err(e) => error(status_for(&e), e.to_string()),
                    }
                }
            },
            _ => error(404, format!("no route for {method} {url}")),
        }
    }

    fn complete(&self, r: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let prompt = Prompt {
            text: r.prompt.clone(),
            query_id: r.query_id.clone().unwrap_or_default(),
            variant_index: r.variant_index,
        };
        let choices = match &r.continuation {
            Some(_) if !self.options.teacher_forcing => {
                return Err(BackendError::Capability("continuation scoring disabled".into()))
            }
            Some(cont) => {
                let trace = self.provider.score_teacher_forced(&prompt, cont, r.top_logprobs)?;
                vec![Choice::from_trace(&trace, None)]
            }
            None if r.temperature == 0.0 => {
                let trace = self.provider.generate_greedy(&prompt, r.max_tokens, r.top_logprobs)?;
                vec![Choice::from_trace(&trace, None)]
            }
            None => self
                .provider
                .sample_responses(&prompt, r.n, r.temperature, r.max_tokens, r.top_logprobs, r.seed.unwrap_or(0))?
                .iter()
                .map(Choice::from_sample)
                .collect(),
        };
        Ok(CompletionResponse { choices })
    }
}
