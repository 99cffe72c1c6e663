//! OpenAI-compatible chat client shared by every external model role
//! (generator, zero-shot solver, verifier, consistency judge), plus
//! deterministic mock backends.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const API_KEY_ENV: &str = "MENTRA_API_KEY";
pub const CHAT_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    ProtocolError(String),
    #[error("authentication rejected (HTTP {0})")]
    AuthError(u16),
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: "system".into(), content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: 0.0,
            max_tokens: None,
        }
    }

    pub fn check(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    pub fn to_wire(&self) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
        });
        if let Some(n) = self.max_tokens {
            body["max_tokens"] = json!(n);
        }
        body
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
}

/// Parses an OpenAI-style completion body.
pub fn parse_completion(body: &str) -> Result<ChatResponse, GatewayError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| GatewayError::ProtocolError(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::ProtocolError("missing choices[0].message.content".into()))?;
    let usage = Usage {
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: v
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok(ChatResponse { text: text.to_string(), usage })
}

pub fn completion_body(text: &str) -> String {
    json!({
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 0, "completion_tokens": text.split_whitespace().count()},
    })
    .to_string()
}

/// Anything that can answer a chat request. Every role client is written against this.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPolicy {
    pub timeout: Duration,
    pub max_retries: usize,
    pub backoff_base: Duration,
    pub concurrency_cap: usize,
}

impl Default for ClientPolicy {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            concurrency_cap: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("timeout")]
    Timeout,
    #[error("connection failure: {0}")]
    Connection(String),
}

pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for HttpTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self
            .agent
            .post(url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .header("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Connection(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Connection(other.to_string()),
        })?;
        Ok(HttpReply { status, body })
    }
}

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    cap: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(cap: usize) -> Self {
        Self { in_flight: Mutex::new(0), freed: Condvar::new(), cap: cap.max(1) }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.cap {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Chat client with retry, exponential backoff and a concurrency cap.
pub struct ChatClient<T: Transport = HttpTransport> {
    base_url: String,
    api_key: Option<String>,
    policy: ClientPolicy,
    transport: T,
    limiter: Limiter,
}

impl ChatClient<HttpTransport> {
    /// Client for `base_url`, reading the credential from `MENTRA_API_KEY`.
    pub fn from_env(base_url: impl Into<String>, policy: ClientPolicy) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_transport(base_url, key, policy, HttpTransport::default())
    }
}

impl<T: Transport> ChatClient<T> {
    pub fn with_transport(
        base_url: impl Into<String>,
        api_key: Option<String>,
        policy: ClientPolicy,
        transport: T,
    ) -> Self {
        let limiter = Limiter::new(policy.concurrency_cap);
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            policy,
            transport,
            limiter,
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn endpoint(&self) -> String {
        format!("{}{}", self.base_url, CHAT_PATH)
    }

    pub fn chat_complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.check()?;
        let url = self.endpoint();
        let body = req.to_wire().to_string();
        let _permit = self.limiter.acquire();

        let mut last = String::new();
        let mut last_was_timeout = false;
        let attempts = self.policy.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                let factor = 1u32 << (attempt - 1).min(16);
                std::thread::sleep(self.policy.backoff_base.saturating_mul(factor));
            }
            match self
                .transport
                .post_json(&url, self.api_key.as_deref(), &body, self.policy.timeout)
            {
                Ok(reply) => match reply.status {
                    200..=299 => return parse_completion(&reply.body),
                    401 | 403 => return Err(GatewayError::AuthError(reply.status)),
                    429 | 500..=599 => {
                        last_was_timeout = false;
                        last = format!("HTTP {}", reply.status);
                    }
                    status => {
                        return Err(GatewayError::Rejected { status, body: reply.body });
                    }
                },
                Err(TransportError::Timeout) => {
                    last_was_timeout = true;
                    last = "timeout".into();
                }
                Err(e) => {
                    last_was_timeout = false;
                    last = e.to_string();
                }
            }
        }
        if last_was_timeout {
            Err(GatewayError::Timeout)
        } else {
            Err(GatewayError::RetriesExhausted { attempts, last })
        }
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(req)
    }
}

impl<T: Transport> ChatBackend for ChatClient<T> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.chat_complete(req)
    }
}

/// Returns the content of the last message.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoBackend;

impl ChatBackend for EchoBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.check()?;
        let text = req.messages.last().map(|m| m.content.clone()).unwrap_or_default();
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: text.split_whitespace().count() as u64,
                completion_tokens: text.split_whitespace().count() as u64,
            },
            text,
        })
    }
}

/// Replays a fixed list of replies in order; repeats the last one once exhausted.
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<Result<String, GatewayError>>>,
    last: Mutex<Option<Result<String, GatewayError>>>,
    calls: AtomicUsize,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_results(replies.into_iter().map(|s| Ok(s.into())))
    }

    pub fn from_results(replies: impl IntoIterator<Item = Result<String, GatewayError>>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            last: Mutex::new(None),
            calls: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.check()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.requests.lock().unwrap_or_else(|e| e.into_inner()).push(req.clone());
        let next = self.replies.lock().unwrap_or_else(|e| e.into_inner()).pop_front();
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        let reply = match next {
            Some(r) => {
                *last = Some(r.clone());
                r
            }
            None => last
                .clone()
                .unwrap_or_else(|| Err(GatewayError::ProtocolError("script exhausted".into()))),
        };
        reply.map(|text| ChatResponse { text, usage: Usage::default() })
    }
}

/// Gateway block of the engine configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_retries: usize,
    pub backoff_ms: u64,
    pub concurrency_cap: usize,
    pub generator_model: String,
    pub solver_model: String,
    pub verifier_model: String,
    pub judge_model: String,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 500,
            concurrency_cap: 8,
            generator_model: "gpt-4o".into(),
            solver_model: "llama-3-8b-instruct".into(),
            verifier_model: "gpt-4o".into(),
            judge_model: "qwen3-32b".into(),
        }
    }
}

impl GatewaySettings {
    pub fn check(&self) -> Result<(), String> {
        if self.concurrency_cap == 0 {
            return Err("gateway: concurrency_cap must be >= 1".into());
        }
        if self.timeout_ms == 0 {
            return Err("gateway: timeout_ms must be > 0".into());
        }
        Ok(())
    }

    pub fn policy(&self) -> ClientPolicy {
        ClientPolicy {
            timeout: Duration::from_millis(self.timeout_ms),
            max_retries: self.max_retries,
            backoff_base: Duration::from_millis(self.backoff_ms),
            concurrency_cap: self.concurrency_cap,
        }
    }
}
