//! HTTP gateway: applies the defense pipeline in front of an
//! OpenAI-compatible chat endpoint.
//!
//! `POST /v1/chat/completions` defends the last user message and
//! forwards earlier turns untouched. Observe mode passes the backend
//! reply through byte-identical; enforce mode replaces refused replies
//! with the configured refusal message. Every response carries
//! `x-repd-refused` and `x-repd-score` headers. `/healthz` reports
//! readiness and `/metrics` exposes JSON counters, both GET.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};

use repd_core::pipeline::{Pipeline, PipelineError, PipelineHandles};
use repd_core::{
    ChatMessage, PromptMode, QuestionStore, RetrievalIndex, Role, TemplateStore, UserPrompt,
};

use crate::config::{Enforcement, GatewayFileConfig};
use crate::CliError;

const HISTOGRAM_BOUNDS_MS: [f64; 13] = [
    1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0, 2000.0, 5000.0, 10000.0,
];

/// Lock-free latency histogram with fixed millisecond buckets.
pub struct Histogram {
    buckets: Vec<AtomicU64>,
    count: AtomicU64,
    sum_us: AtomicU64,
}

impl Histogram {
    fn new() -> Self {
        Self {
            buckets: (0..=HISTOGRAM_BOUNDS_MS.len())
                .map(|_| AtomicU64::new(0))
                .collect(),
            count: AtomicU64::new(0),
            sum_us: AtomicU64::new(0),
        }
    }

    fn observe(&self, ms: f64) {
        let idx = HISTOGRAM_BOUNDS_MS
            .iter()
            .position(|&b| ms <= b)
            .unwrap_or(HISTOGRAM_BOUNDS_MS.len());
        self.buckets[idx].fetch_add(1, Ordering::Relaxed);
        self.count.fetch_add(1, Ordering::Relaxed);
        self.sum_us
            .fetch_add((ms * 1000.0).round() as u64, Ordering::Relaxed);
    }

    fn to_json(&self) -> Value {
        let mut buckets = serde_json::Map::new();
        for (i, bound) in HISTOGRAM_BOUNDS_MS.iter().enumerate() {
            buckets.insert(
                format!("le_{bound}"),
                json!(self.buckets[i].load(Ordering::Relaxed)),
            );
        }
        buckets.insert(
            "le_inf".to_string(),
            json!(self.buckets[HISTOGRAM_BOUNDS_MS.len()].load(Ordering::Relaxed)),
        );
        json!({
            "count": self.count.load(Ordering::Relaxed),
            "sum_ms": self.sum_us.load(Ordering::Relaxed) as f64 / 1000.0,
            "buckets": Value::Object(buckets),
        })
    }
}

/// Gateway counters exposed on `/metrics`.
pub struct GatewayMetrics {
    pub requests: AtomicU64,
    pub refusals: AtomicU64,
    pub bad_requests: AtomicU64,
    pub upstream_errors: AtomicU64,
    pub stage_latency: Vec<Histogram>,
}

impl GatewayMetrics {
    fn new() -> Self {
        Self {
            requests: AtomicU64::new(0),
            refusals: AtomicU64::new(0),
            bad_requests: AtomicU64::new(0),
            upstream_errors: AtomicU64::new(0),
            stage_latency: vec![Histogram::new(), Histogram::new()],
        }
    }
}

pub struct GatewayState {
    pipeline: Pipeline,
    enforcement: Enforcement,
    refusal_message: String,
    run_seed: u64,
    request_seq: AtomicU64,
    pub metrics: GatewayMetrics,
}

impl GatewayState {
    /// Loads corpora, builds the index, and wires the pipeline.
    /// Fails fast on any config or corpus problem.
    pub fn from_config(cfg: &GatewayFileConfig) -> Result<Self, CliError> {
        let templates = TemplateStore::load(&cfg.templates).map_err(CliError::from_corpus)?;
        let questions = QuestionStore::load(&cfg.questions).map_err(CliError::from_corpus)?;
        let index = match cfg.pipeline.mode {
            PromptMode::Retrieval => {
                Some(RetrievalIndex::build(templates).map_err(|e| CliError::File(e.to_string()))?)
            }
            PromptMode::NonRetrieval => None,
        };
        let keywords = crate::config::load_keyword_list(&cfg.keywords)?;
        let lexicon = crate::config::load_lexicon(&cfg.synonyms)?;
        let pipeline = Pipeline::new(
            cfg.pipeline.clone(),
            PipelineHandles {
                index,
                questions,
                lexicon,
                keywords,
                protected: cfg.protected.build(),
                decoupler: cfg.decoupler.as_ref().map(|c| c.build()),
            },
        )
        .map_err(|e| CliError::File(e.to_string()))?;
        Ok(Self {
            pipeline,
            enforcement: cfg.enforcement,
            refusal_message: cfg.refusal_message.clone(),
            run_seed: cfg.pipeline.seed,
            request_seq: AtomicU64::new(0),
            metrics: GatewayMetrics::new(),
        })
    }
}

pub fn build_router(state: Arc<GatewayState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(cfg: GatewayFileConfig) -> Result<(), CliError> {
    let state = Arc::new(GatewayState::from_config(&cfg)?);
    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .map_err(|e| CliError::File(format!("cannot bind {}: {e}", cfg.listen)))?;
    eprintln!(
        "repd gateway listening on {} ({} mode)",
        listener
            .local_addr()
            .map_err(|e| CliError::File(e.to_string()))?,
        match cfg.enforcement {
            Enforcement::Observe => "observe",
            Enforcement::Enforce => "enforce",
        }
    );
    axum::serve(listener, build_router(state))
        .await
        .map_err(|e| CliError::File(format!("server error: {e}")))
}

async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn metrics(State(state): State<Arc<GatewayState>>) -> Json<Value> {
    let m = &state.metrics;
    Json(json!({
        "requests": m.requests.load(Ordering::Relaxed),
        "refusals": m.refusals.load(Ordering::Relaxed),
        "bad_requests": m.bad_requests.load(Ordering::Relaxed),
        "upstream_errors": m.upstream_errors.load(Ordering::Relaxed),
        "stage_latency_ms": m.stage_latency.iter().map(Histogram::to_json).collect::<Vec<_>>(),
    }))
}

// Chat-route errors still carry the defense headers so every response
// from the defended endpoint is annotated.
fn error_response(status: StatusCode, code: &str, message: String) -> Response {
    let mut headers = HeaderMap::new();
    headers.insert("x-repd-refused", HeaderValue::from_static("false"));
    headers.insert("x-repd-score", HeaderValue::from_static("0.0000"));
    (
        status,
        headers,
        Json(json!({"error": {"code": code, "message": message}})),
    )
        .into_response()
}

fn parse_chat_request(body: &Bytes) -> Result<(Vec<ChatMessage>, String), String> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| format!("body is not valid JSON: {e}"))?;
    let model = value
        .get("model")
        .and_then(Value::as_str)
        .unwrap_or("repd")
        .to_string();
    let raw = value
        .get("messages")
        .and_then(Value::as_array)
        .ok_or("missing messages array")?;
    let mut messages = Vec::with_capacity(raw.len());
    for m in raw {
        let role = match m.get("role").and_then(Value::as_str) {
            Some("system") => Role::System,
            Some("user") => Role::User,
            Some("assistant") => Role::Assistant,
            other => return Err(format!("unsupported message role {other:?}")),
        };
        let content = m
            .get("content")
            .and_then(Value::as_str)
            .ok_or("message content must be a string")?
            .to_string();
        messages.push(ChatMessage { role, content });
    }
    if messages.is_empty() {
        return Err("messages array is empty".to_string());
    }
    Ok((messages, model))
}

async fn chat_completions(State(state): State<Arc<GatewayState>>, body: Bytes) -> Response {
    state.metrics.requests.fetch_add(1, Ordering::Relaxed);

    let (messages, model) = match parse_chat_request(&body) {
        Ok(parsed) => parsed,
        Err(message) => {
            state.metrics.bad_requests.fetch_add(1, Ordering::Relaxed);
            return error_response(StatusCode::BAD_REQUEST, "bad_request", message);
        }
    };

    // defend the last user message; everything before it is history
    let Some(last_user_idx) = messages.iter().rposition(|m| m.role == Role::User) else {
        state.metrics.bad_requests.fetch_add(1, Ordering::Relaxed);
        return error_response(
            StatusCode::BAD_REQUEST,
            "bad_request",
            "request carries no user message".to_string(),
        );
    };
    let user = match UserPrompt::new(messages[last_user_idx].content.clone()) {
        Ok(u) => u,
        Err(e) => {
            state.metrics.bad_requests.fetch_add(1, Ordering::Relaxed);
            return error_response(StatusCode::BAD_REQUEST, "bad_request", e.to_string());
        }
    };
    let history: Vec<ChatMessage> = messages[..last_user_idx].to_vec();

    let seq = state.request_seq.fetch_add(1, Ordering::SeqCst);
    let seed = repd_core::rng::derive(state.run_seed, seq);

    let run_state = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || {
        run_state.pipeline.run_with_history(&user, seed, &history)
    })
    .await;

    let guarded = match result {
        Ok(Ok(g)) => g,
        Ok(Err(err)) => {
            let (status, code) = match err {
                PipelineError::Backend(_) => {
                    state
                        .metrics
                        .upstream_errors
                        .fetch_add(1, Ordering::Relaxed);
                    (StatusCode::BAD_GATEWAY, "upstream_error")
                }
                _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal_error"),
            };
            return error_response(status, code, err.to_string());
        }
        Err(join_err) => {
            return error_response(
                StatusCode::INTERNAL_SERVER_ERROR,
                "internal_error",
                join_err.to_string(),
            );
        }
    };

    for (i, latency) in guarded.latencies.iter().enumerate() {
        if let Some(h) = state.metrics.stage_latency.get(i) {
            h.observe(*latency);
        }
    }
    if guarded.refused {
        state.metrics.refusals.fetch_add(1, Ordering::Relaxed);
    }

    let content = match (state.enforcement, guarded.refused) {
        (Enforcement::Enforce, true) => state.refusal_message.clone(),
        _ => guarded.final_text.clone(),
    };
    let score = guarded.retrieval.as_ref().map_or(0.0, |r| r.score);

    let body = json!({
        "id": format!("repd-{seq}"),
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": "stop",
        }],
    });

    let mut headers = HeaderMap::new();
    headers.insert(
        "x-repd-refused",
        HeaderValue::from_static(if guarded.refused { "true" } else { "false" }),
    );
    headers.insert(
        "x-repd-score",
        HeaderValue::from_str(&format!("{score:.4}")).expect("score header is ascii"),
    );
    (StatusCode::OK, headers, Json(body)).into_response()
}
