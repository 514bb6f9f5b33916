//! Bundled mock model server for tests, examples, and offline dry runs.
//!
//! Serves the same wire shape the gateway speaks (`POST /chat/completions`,
//! `POST /embeddings`) on a random local port. Replies come from pluggable
//! behaviors: canned files keyed by request digest, deterministic scripted
//! functions, or failure injectors. Call counts and concurrency peaks are
//! exposed for assertions.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicI64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde_json::json;

use crate::digest::sha256_hex;

/// Parsed view of one incoming chat request.
#[derive(Debug, Clone)]
pub struct ChatView {
    pub model: String,
    /// All text segments joined with newlines, in order.
    pub text: String,
    /// Image attachments as data URLs, in order.
    pub image_urls: Vec<String>,
    pub raw_body: String,
    /// SHA-256 of the raw request body; the fixture-directory key.
    pub digest: String,
}

impl ChatView {
    /// Digest of the first image attachment's data URL, if any.
    pub fn image_digest(&self) -> Option<String> {
        self.image_urls.first().map(|u| sha256_hex(u.as_bytes()))
    }
}

/// What the mock should do with one chat request.
#[derive(Debug, Clone)]
pub enum ChatOutcome {
    Reply(String),
    Status(u16, String),
    /// 200 with an empty assistant message (exercises the terminal
    /// empty-completion path).
    EmptyCompletion,
}

pub trait ChatBehavior: Send + Sync {
    fn respond(&self, request: &ChatView) -> ChatOutcome;
}

impl<F> ChatBehavior for F
where
    F: Fn(&ChatView) -> ChatOutcome + Send + Sync,
{
    fn respond(&self, request: &ChatView) -> ChatOutcome {
        self(request)
    }
}

/// What the mock should do with one embeddings request.
#[derive(Debug, Clone)]
pub enum EmbedOutcome {
    Vectors(Vec<Vec<f64>>),
    Status(u16, String),
}

pub trait EmbedBehavior: Send + Sync {
    fn respond(&self, model: &str, inputs: &[String]) -> EmbedOutcome;
}

impl<F> EmbedBehavior for F
where
    F: Fn(&str, &[String]) -> EmbedOutcome + Send + Sync,
{
    fn respond(&self, model: &str, inputs: &[String]) -> EmbedOutcome {
        self(model, inputs)
    }
}

/// Canned responses from a fixture directory: the reply for a request is the
/// contents of `<sha256(request body)>.txt`; a missing file is a 404.
pub struct FixtureDir {
    pub dir: PathBuf,
}

impl ChatBehavior for FixtureDir {
    fn respond(&self, request: &ChatView) -> ChatOutcome {
        let path = self.dir.join(format!("{}.txt", request.digest));
        match std::fs::read_to_string(&path) {
            Ok(text) => ChatOutcome::Reply(text),
            Err(_) => ChatOutcome::Status(404, format!("no fixture for digest {}", request.digest)),
        }
    }
}

/// Routes chat requests to behaviors by requested model name.
pub struct ModelRouter {
    routes: HashMap<String, Arc<dyn ChatBehavior>>,
    fallback: Arc<dyn ChatBehavior>,
}

impl ModelRouter {
    pub fn new() -> Self {
        ModelRouter {
            routes: HashMap::new(),
            fallback: Arc::new(|v: &ChatView| {
                ChatOutcome::Status(404, format!("no behavior for model {:?}", v.model))
            }),
        }
    }

    pub fn route(mut self, model: &str, behavior: impl ChatBehavior + 'static) -> Self {
        self.routes.insert(model.into(), Arc::new(behavior));
        self
    }

    pub fn fallback(mut self, behavior: impl ChatBehavior + 'static) -> Self {
        self.fallback = Arc::new(behavior);
        self
    }
}

impl Default for ModelRouter {
    fn default() -> Self {
        Self::new()
    }
}

impl ChatBehavior for ModelRouter {
    fn respond(&self, request: &ChatView) -> ChatOutcome {
        self.routes
            .get(&request.model)
            .unwrap_or(&self.fallback)
            .respond(request)
    }
}

/// Fails the first `n` requests with the given status, then delegates.
pub struct FailFirst<B> {
    remaining: AtomicI64,
    pub status: u16,
    pub inner: B,
}

impl<B> FailFirst<B> {
    pub fn new(n: i64, status: u16, inner: B) -> Self {
        FailFirst {
            remaining: AtomicI64::new(n),
            status,
            inner,
        }
    }
}

impl<B: ChatBehavior> ChatBehavior for FailFirst<B> {
    fn respond(&self, request: &ChatView) -> ChatOutcome {
        if self.remaining.fetch_sub(1, Ordering::SeqCst) > 0 {
            return ChatOutcome::Status(self.status, "injected failure".into());
        }
        self.inner.respond(request)
    }
}

/// Replies keyed by the digest of the request's image data URL, with a fixed
/// fallback for unknown images. This is how an "echo the reference answer"
/// model is built without ground truth ever entering the request.
pub struct ImageKeyedReplies {
    pub by_image_digest: HashMap<String, String>,
    pub fallback: ChatOutcome,
}

impl ChatBehavior for ImageKeyedReplies {
    fn respond(&self, request: &ChatView) -> ChatOutcome {
        match request
            .image_digest()
            .and_then(|d| self.by_image_digest.get(&d))
        {
            Some(reply) => ChatOutcome::Reply(reply.clone()),
            None => self.fallback.clone(),
        }
    }
}

fn instruction_wants_fake(text: &str) -> bool {
    // annotation templates quote exactly one output sentence; the merge
    // instruction quotes both and is routed to the aggregator behavior instead
    text.contains("\"This is a fake image.")
}

fn short_digest(view: &ChatView) -> String {
    let d = view
        .image_digest()
        .unwrap_or_else(|| sha256_hex(view.text.as_bytes()));
    d[..12].to_string()
}

/// Deterministic annotator: obeys the template's required output sentence and
/// appends an artifact note derived from the image content, so different
/// records and different annotators get distinct captions.
pub fn scripted_annotator(name: &str) -> impl ChatBehavior {
    let name = name.to_string();
    move |view: &ChatView| {
        let fake = instruction_wants_fake(&view.text);
        let sentence = if fake {
            "This is a fake image."
        } else {
            "This is a real image."
        };
        let note = if fake {
            format!(
                "Observed texture blending and structural distortion near region {} (noted by {}).",
                short_digest(view),
                name
            )
        } else {
            format!(
                "Lighting, texture, and structure look physically consistent in region {} (noted by {}).",
                short_digest(view),
                name
            )
        };
        ChatOutcome::Reply(format!("{sentence} {note}"))
    }
}

/// Annotator that answers against the template's required sentence, for
/// contradiction-handling tests.
pub fn contrarian_annotator(name: &str) -> impl ChatBehavior {
    let name = name.to_string();
    move |view: &ChatView| {
        let fake = instruction_wants_fake(&view.text);
        let sentence = if fake {
            "This is a real image."
        } else {
            "This is a fake image."
        };
        ChatOutcome::Reply(format!(
            "{sentence} Contrarian take from {name} on region {}.",
            short_digest(view)
        ))
    }
}

/// Deterministic aggregator: reads the verdict from the first labeled
/// response and merges the candidate notes into one caption.
pub fn scripted_aggregator() -> impl ChatBehavior {
    |view: &ChatView| {
        let fake = match view.text.find("Response 1: This is a fake image.") {
            Some(_) => true,
            None if view.text.contains("Response 1: This is a real image.") => false,
            None => {
                return ChatOutcome::Reply(
                    "Unable to locate labeled responses in the merge request.".into(),
                )
            }
        };
        let sentence = if fake {
            "This is a fake image."
        } else {
            "This is a real image."
        };
        let mut notes = Vec::new();
        for chunk in view.text.split("\n\nResponse ").skip(1) {
            if let Some((_, rest)) = chunk.split_once(": ") {
                let body = rest
                    .trim_start_matches("This is a fake image.")
                    .trim_start_matches("This is a real image.")
                    .trim();
                notes.push(body.to_string());
            }
        }
        ChatOutcome::Reply(format!("{sentence} Merged evidence: {}", notes.join("; ")))
    }
}

/// The [`ImageKeyedReplies`] key a request attaching this image file will
/// carry, computed through the same encoding path the gateway uses.
pub fn image_reply_key(
    gateway: &crate::gateway::Gateway,
    path: &std::path::Path,
) -> crate::error::Result<String> {
    let (media_type, b64) = gateway.encode_image_file(path)?;
    Ok(sha256_hex(
        crate::gateway::data_url(&media_type, &b64).as_bytes(),
    ))
}

/// Key for an [`ImageKeyedReplies`] entry serving raw attached bytes (e.g. a
/// perturbed raster sent as PNG).
pub fn image_bytes_reply_key(media_type: &str, data: &[u8]) -> String {
    use base64::Engine as _;
    let b64 = base64::engine::general_purpose::STANDARD.encode(data);
    sha256_hex(crate::gateway::data_url(media_type, &b64).as_bytes())
}

/// Deterministic bag-of-hashed-tokens embedding; a pure function of the input
/// text, L2-normalized.
pub fn hash_embedding(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0f64; dim];
    for token in text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let h = sha256_hex(token.as_bytes());
        let idx = usize::from_str_radix(&h[..8], 16).unwrap_or(0) % dim;
        v[idx] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Default embeddings behavior: [`hash_embedding`] per input.
pub struct HashEmbed {
    pub dim: usize,
}

impl Default for HashEmbed {
    fn default() -> Self {
        HashEmbed { dim: 32 }
    }
}

impl EmbedBehavior for HashEmbed {
    fn respond(&self, _model: &str, inputs: &[String]) -> EmbedOutcome {
        EmbedOutcome::Vectors(inputs.iter().map(|t| hash_embedding(t, self.dim)).collect())
    }
}

struct MockState {
    chat: Arc<dyn ChatBehavior>,
    embed: Arc<dyn EmbedBehavior>,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
    per_model: Mutex<HashMap<String, usize>>,
    inflight: AtomicUsize,
    peak_inflight: AtomicUsize,
    response_delay: Option<Duration>,
}

/// A running mock server bound to a random local port.
pub struct MockServer {
    base_url: String,
    state: Arc<MockState>,
    task: tokio::task::JoinHandle<()>,
}

impl MockServer {
    pub async fn spawn(
        chat: impl ChatBehavior + 'static,
        embed: impl EmbedBehavior + 'static,
    ) -> Self {
        Self::spawn_with_delay(chat, embed, None).await
    }

    /// Like [`spawn`](Self::spawn) but holds every request for `delay`, which
    /// makes concurrency bounds observable.
    pub async fn spawn_with_delay(
        chat: impl ChatBehavior + 'static,
        embed: impl EmbedBehavior + 'static,
        delay: Option<Duration>,
    ) -> Self {
        let state = Arc::new(MockState {
            chat: Arc::new(chat),
            embed: Arc::new(embed),
            chat_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
            per_model: Mutex::new(HashMap::new()),
            inflight: AtomicUsize::new(0),
            peak_inflight: AtomicUsize::new(0),
            response_delay: delay,
        });
        let app = Router::new()
            .route("/chat/completions", post(chat_handler))
            .route("/embeddings", post(embed_handler))
            .with_state(state.clone());
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0")
            .await
            .expect("bind mock server");
        let addr = listener.local_addr().expect("mock server addr");
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        MockServer {
            base_url: format!("http://{addr}"),
            state,
            task,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn chat_calls(&self) -> usize {
        self.state.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.state.embed_calls.load(Ordering::SeqCst)
    }

    pub fn chat_calls_for_model(&self, model: &str) -> usize {
        self.state
            .per_model
            .lock()
            .unwrap()
            .get(model)
            .copied()
            .unwrap_or(0)
    }

    /// Peak concurrent requests observed across both routes.
    pub fn peak_inflight(&self) -> usize {
        self.state.peak_inflight.load(Ordering::SeqCst)
    }

    pub fn reset_counters(&self) {
        self.state.chat_calls.store(0, Ordering::SeqCst);
        self.state.embed_calls.store(0, Ordering::SeqCst);
        self.state.per_model.lock().unwrap().clear();
        self.state.peak_inflight.store(0, Ordering::SeqCst);
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

fn parse_chat_view(raw: &str) -> ChatView {
    let value: serde_json::Value = serde_json::from_str(raw).unwrap_or(serde_json::Value::Null);
    let model = value["model"].as_str().unwrap_or_default().to_string();
    let mut texts = Vec::new();
    let mut image_urls = Vec::new();
    if let Some(messages) = value["messages"].as_array() {
        for message in messages {
            match &message["content"] {
                serde_json::Value::String(s) => texts.push(s.clone()),
                serde_json::Value::Array(parts) => {
                    for part in parts {
                        match part["type"].as_str() {
                            Some("text") => {
                                if let Some(t) = part["text"].as_str() {
                                    texts.push(t.to_string());
                                }
                            }
                            Some("image_url") => {
                                if let Some(u) = part["image_url"]["url"].as_str() {
                                    image_urls.push(u.to_string());
                                }
                            }
                            _ => {}
                        }
                    }
                }
                _ => {}
            }
        }
    }
    ChatView {
        model,
        text: texts.join("\n"),
        image_urls,
        digest: sha256_hex(raw.as_bytes()),
        raw_body: raw.to_string(),
    }
}

struct InflightToken<'a>(&'a MockState);

impl<'a> InflightToken<'a> {
    fn enter(state: &'a MockState) -> Self {
        let now = state.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        state.peak_inflight.fetch_max(now, Ordering::SeqCst);
        InflightToken(state)
    }
}

impl Drop for InflightToken<'_> {
    fn drop(&mut self) {
        self.0.inflight.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn chat_handler(State(state): State<Arc<MockState>>, raw: String) -> Response {
    let _token = InflightToken::enter(&state);
    if let Some(delay) = state.response_delay {
        tokio::time::sleep(delay).await;
    }
    let view = parse_chat_view(&raw);
    state.chat_calls.fetch_add(1, Ordering::SeqCst);
    *state
        .per_model
        .lock()
        .unwrap()
        .entry(view.model.clone())
        .or_default() += 1;

    match state.chat.respond(&view) {
        ChatOutcome::Reply(text) => {
            let body = json!({
                "id": "mock",
                "object": "chat.completion",
                "model": view.model,
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": text},
                    "finish_reason": "stop"
                }]
            });
            (StatusCode::OK, body.to_string()).into_response()
        }
        ChatOutcome::EmptyCompletion => {
            let body = json!({
                "id": "mock",
                "object": "chat.completion",
                "model": view.model,
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": ""},
                    "finish_reason": "stop"
                }]
            });
            (StatusCode::OK, body.to_string()).into_response()
        }
        ChatOutcome::Status(code, message) => (
            StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            message,
        )
            .into_response(),
    }
}

async fn embed_handler(State(state): State<Arc<MockState>>, raw: String) -> Response {
    let _token = InflightToken::enter(&state);
    if let Some(delay) = state.response_delay {
        tokio::time::sleep(delay).await;
    }
    state.embed_calls.fetch_add(1, Ordering::SeqCst);
    let value: serde_json::Value = serde_json::from_str(&raw).unwrap_or(serde_json::Value::Null);
    let model = value["model"].as_str().unwrap_or_default().to_string();
    let inputs: Vec<String> = match value["input"].as_array() {
        Some(arr) => arr
            .iter()
            .filter_map(|v| v.as_str().map(str::to_string))
            .collect(),
        None => Vec::new(),
    };
    match state.embed.respond(&model, &inputs) {
        EmbedOutcome::Vectors(vectors) => {
            let data: Vec<_> = vectors
                .iter()
                .enumerate()
                .map(|(i, v)| json!({"object": "embedding", "index": i, "embedding": v}))
                .collect();
            let body = json!({"object": "list", "model": model, "data": data});
            (StatusCode::OK, body.to_string()).into_response()
        }
        EmbedOutcome::Status(code, message) => (
            StatusCode::from_u16(code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            message,
        )
            .into_response(),
    }
}
