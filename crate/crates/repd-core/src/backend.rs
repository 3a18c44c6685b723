//! Chat backends: an OpenAI-compatible HTTP client and a scripted mock.
//!
//! Both sit behind the [`Backend`] trait so the pipeline and evaluator
//! never care which one they talk to. Backends must tolerate concurrent
//! `chat` calls; all per-call state is local.

use std::env;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

/// Env var holding the bearer token for HTTP backends.
pub const API_KEY_ENV: &str = "REPD_BACKEND_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid message list: {0}")]
    InvalidMessages(String),
    #[error("request timed out")]
    Timeout,
    #[error("http error {status}")]
    Http { status: u16 },
    #[error("authentication rejected (status {status})")]
    Auth { status: u16 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// One downstream reply plus how long it took and who produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub content: String,
    pub latency_ms: f64,
    pub backend_id: String,
    /// (prompt, completion) token counts when the backend reports usage.
    pub token_counts: Option<(u64, u64)>,
}

/// Decoding parameters for one chat call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 1024,
            timeout_ms: 60_000,
        }
    }
}

/// Rejects message lists the wire protocol cannot carry, before any I/O.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    let last = messages
        .last()
        .ok_or_else(|| BackendError::InvalidMessages("message list is empty".to_string()))?;
    if last.role != Role::User {
        return Err(BackendError::InvalidMessages(
            "last message must have role user".to_string(),
        ));
    }
    for m in messages {
        if m.role != Role::System && m.content.is_empty() {
            return Err(BackendError::InvalidMessages(
                "user/assistant content must be non-empty".to_string(),
            ));
        }
    }
    Ok(())
}

/// A chat model the pipeline can talk to.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    /// Default decoding parameters for this backend.
    fn params(&self) -> ChatParams {
        ChatParams::default()
    }

    /// Sends one chat exchange and returns the first choice.
    fn chat(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
    ) -> Result<BackendReply, BackendError>;
}

// ---------------------------------------------------------------------------
// Scripted mock
// ---------------------------------------------------------------------------

/// One scripted rule: if `pattern` occurs in the last user message the
/// mock answers `reply`; `else_reply` of the last rule is the fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    pub reply: String,
    pub else_reply: String,
}

/// First-match rule evaluation over the last user message. Pure:
/// identical (rules, messages) always yield the identical reply, with
/// latency exactly 0.
pub fn mock_reply(rules: &[MockRule], messages: &[ChatMessage]) -> BackendReply {
    assert!(!rules.is_empty(), "mock_reply requires at least one rule");
    let last = messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("");
    let content = rules
        .iter()
        .find(|r| last.contains(&r.pattern))
        .map(|r| r.reply.clone())
        .unwrap_or_else(|| rules[rules.len() - 1].else_reply.clone());
    BackendReply {
        content,
        latency_ms: 0.0,
        backend_id: "mock".to_string(),
        token_counts: None,
    }
}

/// Deterministic scripted backend with a call counter and an optional
/// fixed reported latency (for time-cost experiments; no real sleeping).
pub struct MockBackend {
    id: String,
    rules: Vec<MockRule>,
    latency_ms: f64,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(id: impl Into<String>, rules: Vec<MockRule>) -> Self {
        assert!(!rules.is_empty(), "mock backend requires at least one rule");
        Self {
            id: id.into(),
            rules,
            latency_ms: 0.0,
            calls: AtomicU64::new(0),
        }
    }

    /// A mock that always answers `reply` regardless of input.
    pub fn constant(id: impl Into<String>, reply: impl Into<String>) -> Self {
        let reply = reply.into();
        Self::new(
            id,
            vec![MockRule {
                pattern: "\u{0}never-matches\u{0}".to_string(),
                reply: reply.clone(),
                else_reply: reply,
            }],
        )
    }

    pub fn with_latency(mut self, latency_ms: f64) -> Self {
        self.latency_ms = latency_ms;
        self
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(
        &self,
        messages: &[ChatMessage],
        _params: &ChatParams,
    ) -> Result<BackendReply, BackendError> {
        validate_messages(messages)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut reply = mock_reply(&self.rules, messages);
        reply.backend_id = self.id.clone();
        reply.latency_ms = self.latency_ms;
        Ok(reply)
    }
}

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP client
// ---------------------------------------------------------------------------

/// Connection settings for an OpenAI-compatible chat-completions
/// endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_timeout_ms() -> u64 {
    60_000
}

/// Blocking client for `POST {base_url}/chat/completions`.
///
/// Retries once on transient failures (5xx, timeout); authentication
/// rejections (401/403) are never retried. A retried success is marked
/// in the reply's `backend_id`.
pub struct HttpBackend {
    id: String,
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, config: HttpBackendConfig) -> Self {
        Self {
            id: id.into(),
            config,
            api_key: env::var(API_KEY_ENV).ok(),
            client: OnceLock::new(),
        }
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn client(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .build()
                .expect("http client builds")
        })
    }

    fn attempt(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
    ) -> Result<BackendReply, BackendError> {
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let started = Instant::now();
        let mut req = self
            .client()
            .post(self.endpoint())
            .timeout(Duration::from_millis(params.timeout_ms))
            .json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth { status }),
            _ => return Err(BackendError::Http { status }),
        }
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| BackendError::Protocol(format!("invalid JSON body: {e}")))?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .ok_or_else(|| {
                BackendError::Protocol("response is missing choices[0].message.content".to_string())
            })?
            .to_string();
        let token_counts = match (
            value
                .pointer("/usage/prompt_tokens")
                .and_then(|v| v.as_u64()),
            value
                .pointer("/usage/completion_tokens")
                .and_then(|v| v.as_u64()),
        ) {
            (Some(p), Some(c)) => Some((p, c)),
            _ => None,
        };
        Ok(BackendReply {
            content,
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
            backend_id: self.id.clone(),
            token_counts,
        })
    }
}

fn is_transient(err: &BackendError) -> bool {
    match err {
        BackendError::Timeout => true,
        BackendError::Http { status } => *status >= 500,
        _ => false,
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn params(&self) -> ChatParams {
        ChatParams {
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
            timeout_ms: self.config.timeout_ms,
        }
    }

    fn chat(
        &self,
        messages: &[ChatMessage],
        params: &ChatParams,
    ) -> Result<BackendReply, BackendError> {
        validate_messages(messages)?;
        match self.attempt(messages, params) {
            Ok(reply) => Ok(reply),
            Err(err) if is_transient(&err) => {
                let mut reply = self.attempt(messages, params)?;
                reply.backend_id = format!("{}+retry1", self.id);
                Ok(reply)
            }
            Err(err) => Err(err),
        }
    }
}

// ---------------------------------------------------------------------------
// Config-file form
// ---------------------------------------------------------------------------

/// Backend description as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum BackendConfig {
    Http {
        #[serde(flatten)]
        config: HttpBackendConfig,
        #[serde(default)]
        id: Option<String>,
    },
    Mock {
        rules: Vec<MockRule>,
        #[serde(default)]
        latency_ms: f64,
        #[serde(default)]
        id: Option<String>,
    },
}

impl BackendConfig {
    /// Instantiates the configured backend.
    pub fn build(&self) -> std::sync::Arc<dyn Backend> {
        match self {
            BackendConfig::Http { config, id } => std::sync::Arc::new(HttpBackend::new(
                id.clone().unwrap_or_else(|| "http".to_string()),
                config.clone(),
            )),
            BackendConfig::Mock {
                rules,
                latency_ms,
                id,
            } => std::sync::Arc::new(
                MockBackend::new(
                    id.clone().unwrap_or_else(|| "mock".to_string()),
                    rules.clone(),
                )
                .with_latency(*latency_ms),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn rules() -> Vec<MockRule> {
        vec![
            MockRule {
                pattern: "hotwire".to_string(),
                reply: "I'm sorry, I cannot help with that.".to_string(),
                else_reply: String::new(),
            },
            MockRule {
                pattern: "France".to_string(),
                reply: "The capital of France is Paris.".to_string(),
                else_reply: "Tell me more.".to_string(),
            },
        ]
    }

    #[test]
    fn mock_matches_rule_on_last_user_message() {
        let reply = mock_reply(&rules(), &[ChatMessage::user("how to hotwire a car")]);
        assert_eq!(reply.content, "I'm sorry, I cannot help with that.");
        assert_eq!(reply.latency_ms, 0.0);
    }

    #[test]
    fn mock_first_match_wins() {
        let both = vec![
            MockRule {
                pattern: "a".to_string(),
                reply: "first".to_string(),
                else_reply: String::new(),
            },
            MockRule {
                pattern: "a".to_string(),
                reply: "second".to_string(),
                else_reply: "fallback".to_string(),
            },
        ];
        let reply = mock_reply(&both, &[ChatMessage::user("aaa")]);
        assert_eq!(reply.content, "first");
    }

    #[test]
    fn mock_falls_back_to_last_else_reply() {
        let reply = mock_reply(&rules(), &[ChatMessage::user("nothing matches")]);
        assert_eq!(reply.content, "Tell me more.");
    }

    #[test]
    fn mock_backend_counts_calls() {
        let backend = MockBackend::new("m", rules());
        let params = ChatParams::default();
        backend
            .chat(&[ChatMessage::user("France please")], &params)
            .unwrap();
        backend
            .chat(&[ChatMessage::user("France please")], &params)
            .unwrap();
        assert_eq!(backend.call_count(), 2);
    }

    #[test]
    fn empty_message_list_rejected_before_io() {
        let backend = MockBackend::new("m", rules());
        let err = backend.chat(&[], &ChatParams::default()).unwrap_err();
        assert!(matches!(err, BackendError::InvalidMessages(_)));
        assert_eq!(backend.call_count(), 0);
    }

    #[test]
    fn last_message_must_be_user() {
        let err = validate_messages(&[ChatMessage::assistant("hello")]).unwrap_err();
        assert!(matches!(err, BackendError::InvalidMessages(_)));
    }

    // -- HTTP backend against a hand-rolled local server --------------------

    /// Serves one canned HTTP response per incoming connection, in order.
    fn spawn_scripted_server(responses: Vec<String>) -> std::net::SocketAddr {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for response in responses {
                let (mut sock, _) = match listener.accept() {
                    Ok(pair) => pair,
                    Err(_) => return,
                };
                let mut buf = vec![0u8; 65536];
                let mut read_total = 0usize;
                // read until end of headers, then trust content-length
                loop {
                    let n = match sock.read(&mut buf[read_total..]) {
                        Ok(0) => break,
                        Ok(n) => n,
                        Err(_) => return,
                    };
                    read_total += n;
                    let text = String::from_utf8_lossy(&buf[..read_total]);
                    if let Some(header_end) = text.find("\r\n\r\n") {
                        let content_length = text
                            .lines()
                            .find_map(|l| {
                                let l = l.to_ascii_lowercase();
                                l.strip_prefix("content-length:")
                                    .map(|v| v.trim().parse::<usize>().unwrap_or(0))
                            })
                            .unwrap_or(0);
                        if read_total >= header_end + 4 + content_length {
                            break;
                        }
                    }
                }
                let _ = sock.write_all(response.as_bytes());
            }
        });
        addr
    }

    fn ok_response(body: &str) -> String {
        format!(
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
            body.len(),
            body
        )
    }

    fn status_response(status: u16, reason: &str) -> String {
        format!("HTTP/1.1 {status} {reason}\r\ncontent-length: 0\r\nconnection: close\r\n\r\n")
    }

    fn http_backend(addr: std::net::SocketAddr) -> HttpBackend {
        HttpBackend::new(
            "test-http",
            HttpBackendConfig {
                base_url: format!("http://{addr}"),
                model: "test-model".to_string(),
                temperature: 0.0,
                max_tokens: 64,
                timeout_ms: 5_000,
            },
        )
    }

    const CHAT_BODY: &str = r#"{"choices":[{"message":{"role":"assistant","content":"hello there"}}],"usage":{"prompt_tokens":7,"completion_tokens":3}}"#;

    #[test]
    fn http_backend_parses_reply_and_usage() {
        let addr = spawn_scripted_server(vec![ok_response(CHAT_BODY)]);
        let backend = http_backend(addr);
        let reply = backend
            .chat(&[ChatMessage::user("hi")], &backend.params())
            .unwrap();
        assert_eq!(reply.content, "hello there");
        assert_eq!(reply.token_counts, Some((7, 3)));
        assert_eq!(reply.backend_id, "test-http");
        assert!(reply.latency_ms >= 0.0);
    }

    #[test]
    fn http_backend_retries_transient_503() {
        let addr = spawn_scripted_server(vec![
            status_response(503, "Service Unavailable"),
            ok_response(CHAT_BODY),
        ]);
        let backend = http_backend(addr);
        let reply = backend
            .chat(&[ChatMessage::user("hi")], &backend.params())
            .unwrap();
        assert_eq!(reply.content, "hello there");
        assert!(
            reply.backend_id.contains("retry"),
            "retry must be recorded, got {}",
            reply.backend_id
        );
    }

    #[test]
    fn http_backend_does_not_retry_auth_errors() {
        let addr = spawn_scripted_server(vec![
            status_response(401, "Unauthorized"),
            ok_response(CHAT_BODY),
        ]);
        let backend = http_backend(addr);
        let err = backend
            .chat(&[ChatMessage::user("hi")], &backend.params())
            .unwrap_err();
        assert!(matches!(err, BackendError::Auth { status: 401 }));
    }

    #[test]
    fn http_backend_rejects_missing_choices() {
        let addr = spawn_scripted_server(vec![ok_response(r#"{"object":"chat.completion"}"#)]);
        let backend = http_backend(addr);
        let err = backend
            .chat(&[ChatMessage::user("hi")], &backend.params())
            .unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)));
    }

    #[test]
    fn backend_config_round_trips_and_builds() {
        let cfg: BackendConfig = serde_json::from_str(
            r#"{"type":"mock","rules":[{"pattern":"x","reply":"y","else_reply":"z"}]}"#,
        )
        .unwrap();
        let backend = cfg.build();
        let reply = backend
            .chat(&[ChatMessage::user("x marks")], &ChatParams::default())
            .unwrap();
        assert_eq!(reply.content, "y");

        let http: BackendConfig =
            serde_json::from_str(r#"{"type":"http","base_url":"http://127.0.0.1:9","model":"m"}"#)
                .unwrap();
        match &http {
            BackendConfig::Http { config, .. } => {
                assert_eq!(config.max_tokens, 1024);
                assert_eq!(config.timeout_ms, 60_000);
            }
            _ => panic!("expected http config"),
        }
    }
}
