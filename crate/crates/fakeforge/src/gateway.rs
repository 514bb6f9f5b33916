//! Client layer for external model services: vision-chat completion and text
//! embedding over the OpenAI-compatible wire shape, with bounded per-endpoint
//! concurrency, retries, and byte-deterministic request construction.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::digest::sha256_hex;
use crate::error::{Error, Result};

/// Backoff schedule: exponential windows with in-window jitter, so consecutive
/// delays never decrease, capped at `max_delay_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 1_000,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Jittered delay before attempt `attempt + 1` (attempt is 1-based).
    /// Window for attempt k is [base*2^(k-1), base*2^k), clamped to the cap,
    /// which keeps the sequence nondecreasing.
    pub fn delay_before_retry(&self, attempt: u32, unit: f64) -> Duration {
        let low = (self.base_delay_ms as f64) * 2f64.powi(attempt as i32 - 1);
        let span = low; // window width equals its lower bound
        let jittered = low + span * unit.clamp(0.0, 1.0);
        Duration::from_millis((jittered.min(self.max_delay_ms as f64)) as u64)
    }
}

/// One external model service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Filled from the config table key when loaded from file.
    #[serde(default)]
    pub name: String,
    pub base_url: String,
    /// Environment variable holding the bearer token; empty disables auth.
    #[serde(default)]
    pub api_key_env: String,
    pub model_name: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_max_in_flight() -> usize {
    4
}
fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_tokens() -> u32 {
    1_024
}

impl EndpointConfig {
    /// Minimal config against a local or mock server: temperature 0, no auth.
    pub fn local(name: &str, base_url: &str, model_name: &str) -> Self {
        EndpointConfig {
            name: name.into(),
            base_url: base_url.trim_end_matches('/').into(),
            api_key_env: String::new(),
            model_name: model_name.into(),
            max_in_flight: default_max_in_flight(),
            timeout_secs: default_timeout_secs(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_in_flight < 1 {
            return Err(Error::Config(format!(
                "endpoint {}: max_in_flight must be >= 1",
                self.name
            )));
        }
        if self.timeout_secs <= 0.0 {
            return Err(Error::Config(format!(
                "endpoint {}: timeout must be positive",
                self.name
            )));
        }
        if self.temperature < 0.0 {
            return Err(Error::Config(format!(
                "endpoint {}: temperature must be >= 0",
                self.name
            )));
        }
        if self.retry.max_attempts < 1 {
            return Err(Error::Config(format!(
                "endpoint {}: retry.max_attempts must be >= 1",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn wire(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One content part of a message. Files go through the attachment encoding
/// rule (JPEG passthrough, everything else re-encoded JPEG q95); raw bytes are
/// attached exactly as given.
#[derive(Debug, Clone, PartialEq)]
pub enum MessagePart {
    Text(String),
    ImageFile(PathBuf),
    ImageBytes { media_type: String, data: Vec<u8> },
}

impl MessagePart {
    pub fn image_file(path: impl AsRef<Path>) -> Self {
        MessagePart::ImageFile(path.as_ref().to_path_buf())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<MessagePart>,
}

/// Ordered messages making up one request. At most one image attachment per
/// request in this harness.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageSequence(Vec<Message>);

impl MessageSequence {
    pub fn new(messages: Vec<Message>) -> Self {
        MessageSequence(messages)
    }

    /// Single text-only user message.
    pub fn user_text(text: impl Into<String>) -> Self {
        MessageSequence(vec![Message {
            role: Role::User,
            parts: vec![MessagePart::Text(text.into())],
        }])
    }

    /// Single user message carrying one image followed by a question.
    pub fn user_image_question(path: impl AsRef<Path>, question: impl Into<String>) -> Self {
        MessageSequence(vec![Message {
            role: Role::User,
            parts: vec![
                MessagePart::image_file(path),
                MessagePart::Text(question.into()),
            ],
        }])
    }

    pub fn messages(&self) -> &[Message] {
        &self.0
    }

    fn image_count(&self) -> usize {
        self.0
            .iter()
            .flat_map(|m| m.parts.iter())
            .filter(|p| !matches!(p, MessagePart::Text(_)))
            .count()
    }
}

/// Sink receiving every completed request/response pair.
pub trait RequestJournal: Send + Sync {
    fn record(&self, endpoint: &str, kind: &str, request_body: &str, response_text: &str);
}

/// In-memory journal for audits and tests.
#[derive(Default)]
pub struct MemoryJournal {
    entries: Mutex<Vec<JournalEntry>>,
}

#[derive(Debug, Clone)]
pub struct JournalEntry {
    pub endpoint: String,
    pub kind: String,
    pub request_body: String,
    pub response_text: String,
}

impl MemoryJournal {
    pub fn entries(&self) -> Vec<JournalEntry> {
        self.entries.lock().unwrap().clone()
    }
}

impl RequestJournal for MemoryJournal {
    fn record(&self, endpoint: &str, kind: &str, request_body: &str, response_text: &str) {
        self.entries.lock().unwrap().push(JournalEntry {
            endpoint: endpoint.into(),
            kind: kind.into(),
            request_body: request_body.into(),
            response_text: response_text.into(),
        });
    }
}

#[derive(Default)]
struct InflightGauge {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl InflightGauge {
    fn enter(&self) {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }
    fn exit(&self) {
        self.current.fetch_sub(1, Ordering::SeqCst);
    }
}

struct EndpointState {
    semaphore: Arc<Semaphore>,
    gauge: InflightGauge,
}

/// Cached attachment encoding: read once per call, decoded/re-encoded once per
/// content digest.
struct EncodedImage {
    media_type: String,
    base64: String,
}

// ---- wire types (OpenAI-compatible) ----

#[derive(Serialize)]
struct WireChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage {
    role: &'static str,
    content: WireContent,
}

#[derive(Serialize)]
#[serde(untagged)]
enum WireContent {
    Text(String),
    Parts(Vec<WirePart>),
}

#[derive(Serialize)]
#[serde(tag = "type")]
enum WirePart {
    #[serde(rename = "image_url")]
    ImageUrl { image_url: WireImageUrl },
    #[serde(rename = "text")]
    Text { text: String },
}

#[derive(Serialize)]
struct WireImageUrl {
    url: String,
}

#[derive(Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Serialize)]
struct WireEmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct WireEmbedResponse {
    data: Vec<WireEmbedding>,
}

#[derive(Deserialize)]
struct WireEmbedding {
    index: usize,
    embedding: Vec<f64>,
}

enum AttemptOutcome {
    Ok(String),
    Retryable(String),
    Terminal(String),
}

/// Canonical data-URL form for image attachments.
pub fn data_url(media_type: &str, base64_payload: &str) -> String {
    format!("data:{media_type};base64,{base64_payload}")
}

/// Shared client for all configured endpoints. Safe for concurrent use; each
/// endpoint's in-flight requests are bounded by its `max_in_flight`.
pub struct Gateway {
    client: reqwest::Client,
    endpoints: Mutex<HashMap<String, Arc<EndpointState>>>,
    image_cache: Mutex<HashMap<String, Arc<EncodedImage>>>,
    journal: Option<Arc<dyn RequestJournal>>,
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Gateway {
            client: reqwest::Client::new(),
            endpoints: Mutex::new(HashMap::new()),
            image_cache: Mutex::new(HashMap::new()),
            journal: None,
        }
    }

    pub fn with_journal(journal: Arc<dyn RequestJournal>) -> Self {
        let mut g = Gateway::new();
        g.journal = Some(journal);
        g
    }

    fn state_for(&self, endpoint: &EndpointConfig) -> Arc<EndpointState> {
        let mut map = self.endpoints.lock().unwrap();
        map.entry(endpoint.name.clone())
            .or_insert_with(|| {
                Arc::new(EndpointState {
                    semaphore: Arc::new(Semaphore::new(endpoint.max_in_flight)),
                    gauge: InflightGauge::default(),
                })
            })
            .clone()
    }

    /// Peak concurrent in-flight requests observed for an endpoint (test hook).
    pub fn inflight_peak(&self, endpoint_name: &str) -> usize {
        self.endpoints
            .lock()
            .unwrap()
            .get(endpoint_name)
            .map(|s| s.gauge.peak.load(Ordering::SeqCst))
            .unwrap_or(0)
    }

    /// Encode an image file for attachment: JPEG passes through, anything else
    /// is re-encoded as JPEG quality 95. Results are cached by content digest.
    pub fn encode_image_file(&self, path: &Path) -> Result<(String, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = sha256_hex(&bytes);
        if let Some(hit) = self.image_cache.lock().unwrap().get(&digest) {
            return Ok((hit.media_type.clone(), hit.base64.clone()));
        }
        let encoded = encode_attachment(&bytes).map_err(|msg| Error::ImageUnreadable {
            record_id: String::new(),
            path: path.to_path_buf(),
            message: msg,
        })?;
        let entry = Arc::new(encoded);
        self.image_cache
            .lock()
            .unwrap()
            .insert(digest, entry.clone());
        Ok((entry.media_type.clone(), entry.base64.clone()))
    }

    /// Serialize the chat request body; byte-identical for equal inputs.
    pub fn chat_body(&self, endpoint: &EndpointConfig, messages: &MessageSequence) -> Result<String> {
        if messages.image_count() > 1 {
            return Err(Error::Precondition(
                "at most one image attachment per request".into(),
            ));
        }
        let mut wire_messages = Vec::with_capacity(messages.messages().len());
        for message in messages.messages() {
            let has_image = message
                .parts
                .iter()
                .any(|p| !matches!(p, MessagePart::Text(_)));
            let content = if has_image {
                let mut parts = Vec::with_capacity(message.parts.len());
                for part in &message.parts {
                    match part {
                        MessagePart::Text(text) => parts.push(WirePart::Text { text: text.clone() }),
                        MessagePart::ImageFile(path) => {
                            let (media_type, b64) = self.encode_image_file(path)?;
                            parts.push(WirePart::ImageUrl {
                                image_url: WireImageUrl {
                                    url: data_url(&media_type, &b64),
                                },
                            });
                        }
                        MessagePart::ImageBytes { media_type, data } => {
                            let b64 = base64::engine::general_purpose::STANDARD.encode(data);
                            parts.push(WirePart::ImageUrl {
                                image_url: WireImageUrl {
                                    url: data_url(media_type, &b64),
                                },
                            });
                        }
                    }
                }
                WireContent::Parts(parts)
            } else {
                let text = message
                    .parts
                    .iter()
                    .map(|p| match p {
                        MessagePart::Text(t) => t.as_str(),
                        _ => unreachable!(),
                    })
                    .collect::<Vec<_>>()
                    .join("\n");
                WireContent::Text(text)
            };
            wire_messages.push(WireMessage {
                role: message.role.wire(),
                content,
            });
        }
        let request = WireChatRequest {
            model: &endpoint.model_name,
            messages: wire_messages,
            temperature: endpoint.temperature,
            max_tokens: endpoint.max_tokens,
        };
        serde_json::to_string(&request).map_err(|e| Error::Other(e.to_string()))
    }

    /// Send a chat completion and return the assistant text of the first
    /// choice. Transport failures, HTTP 5xx and 429 are retried per policy;
    /// other 4xx and empty completions are terminal.
    pub async fn chat(&self, endpoint: &EndpointConfig, messages: &MessageSequence) -> Result<String> {
        let body = self.chat_body(endpoint, messages)?;
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let text = self
            .send_with_retry(endpoint, &url, &body, |raw| {
                let parsed: WireChatResponse =
                    serde_json::from_str(raw).map_err(|e| format!("malformed response: {e}"))?;
                let content = parsed
                    .choices
                    .first()
                    .and_then(|c| c.message.content.clone())
                    .unwrap_or_default();
                if content.is_empty() {
                    return Err("empty completion".into());
                }
                Ok(content)
            })
            .await?;
        if let Some(journal) = &self.journal {
            journal.record(&endpoint.name, "chat", &body, &text);
        }
        Ok(text)
    }

    /// Embed a batch of texts; one vector per input, order preserved, all the
    /// same dimension.
    pub async fn embed(&self, endpoint: &EndpointConfig, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
        if inputs.is_empty() {
            return Err(Error::Precondition("embedding input list is empty".into()));
        }
        if inputs.iter().any(|i| i.is_empty()) {
            return Err(Error::Precondition("embedding inputs must be non-empty".into()));
        }
        let body = serde_json::to_string(&WireEmbedRequest {
            model: &endpoint.model_name,
            input: inputs,
        })
        .map_err(|e| Error::Other(e.to_string()))?;
        let url = format!("{}/embeddings", endpoint.base_url.trim_end_matches('/'));
        let expected = inputs.len();
        let raw = self
            .send_with_retry(endpoint, &url, &body, |raw| Ok(raw.to_string()))
            .await?;
        let parsed: WireEmbedResponse = serde_json::from_str(&raw).map_err(|e| Error::Endpoint {
            endpoint: endpoint.name.clone(),
            attempts: 1,
            message: format!("malformed embeddings response: {e}"),
        })?;
        if parsed.data.len() != expected {
            return Err(Error::Endpoint {
                endpoint: endpoint.name.clone(),
                attempts: 1,
                message: format!("expected {expected} embeddings, got {}", parsed.data.len()),
            });
        }
        let mut data = parsed.data;
        data.sort_by_key(|d| d.index);
        let dim = data[0].embedding.len();
        if data.iter().any(|d| d.embedding.len() != dim) {
            return Err(Error::Endpoint {
                endpoint: endpoint.name.clone(),
                attempts: 1,
                message: "embedding dimensions differ within one batch".into(),
            });
        }
        if let Some(journal) = &self.journal {
            journal.record(&endpoint.name, "embed", &body, &raw);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }

    async fn send_with_retry<T>(
        &self,
        endpoint: &EndpointConfig,
        url: &str,
        body: &str,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        endpoint.validate()?;
        let state = self.state_for(endpoint);
        let _permit = state
            .semaphore
            .clone()
            .acquire_owned()
            .await
            .expect("semaphore closed");
        state.gauge.enter();
        let result = self.attempt_loop(endpoint, url, body, parse).await;
        state.gauge.exit();
        result
    }

    async fn attempt_loop<T>(
        &self,
        endpoint: &EndpointConfig,
        url: &str,
        body: &str,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let api_key = if endpoint.api_key_env.is_empty() {
            None
        } else {
            match std::env::var(&endpoint.api_key_env) {
                Ok(v) => Some(v),
                Err(_) => {
                    tracing::debug!(endpoint = %endpoint.name, var = %endpoint.api_key_env,
                        "api key variable unset; sending without auth");
                    None
                }
            }
        };

        let max_attempts = endpoint.retry.max_attempts.max(1);
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            match self.one_attempt(endpoint, url, body, api_key.as_deref()).await {
                AttemptOutcome::Ok(raw) => {
                    return parse(&raw).map_err(|message| Error::Endpoint {
                        endpoint: endpoint.name.clone(),
                        attempts: attempt,
                        message,
                    });
                }
                AttemptOutcome::Terminal(message) => {
                    return Err(Error::Endpoint {
                        endpoint: endpoint.name.clone(),
                        attempts: attempt,
                        message,
                    });
                }
                AttemptOutcome::Retryable(message) => {
                    last_error = message;
                    if attempt < max_attempts {
                        let unit = rand::thread_rng().gen::<f64>();
                        let delay = endpoint.retry.delay_before_retry(attempt, unit);
                        tracing::debug!(endpoint = %endpoint.name, attempt, ?delay, error = %last_error, "retrying");
                        tokio::time::sleep(delay).await;
                    }
                }
            }
        }
        Err(Error::Endpoint {
            endpoint: endpoint.name.clone(),
            attempts: max_attempts,
            message: last_error,
        })
    }

    async fn one_attempt(
        &self,
        endpoint: &EndpointConfig,
        url: &str,
        body: &str,
        api_key: Option<&str>,
    ) -> AttemptOutcome {
        let mut request = self
            .client
            .post(url)
            .header("content-type", "application/json")
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .body(body.to_string());
        if let Some(key) = api_key {
            request = request.header("authorization", format!("Bearer {key}"));
        }
        let response = match request.send().await {
            Ok(r) => r,
            Err(e) => return AttemptOutcome::Retryable(format!("transport: {e}")),
        };
        let status = response.status();
        let raw = response.text().await.unwrap_or_default();
        if status.is_success() {
            AttemptOutcome::Ok(raw)
        } else if status.as_u16() == 429 || status.is_server_error() {
            AttemptOutcome::Retryable(format!("http {status}"))
        } else {
            AttemptOutcome::Terminal(format!("http {status}: {raw}"))
        }
    }
}

fn encode_attachment(bytes: &[u8]) -> std::result::Result<EncodedImage, String> {
    let engine = &base64::engine::general_purpose::STANDARD;
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Jpeg) => Ok(EncodedImage {
            media_type: "image/jpeg".into(),
            base64: engine.encode(bytes),
        }),
        Ok(_) => {
            let decoded = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
            let rgb = decoded.to_rgb8();
            let mut out = Vec::new();
            let mut encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, 95);
            encoder
                .encode(rgb.as_raw(), rgb.width(), rgb.height(), image::ExtendedColorType::Rgb8)
                .map_err(|e| e.to_string())?;
            Ok(EncodedImage {
                media_type: "image/jpeg".into(),
                base64: engine.encode(&out),
            })
        }
        Err(e) => Err(format!("not a decodable image: {e}")),
    }
}

/// Batch text-embedding abstraction so scoring code can run against the
/// gateway or a local deterministic stand-in.
pub trait Embedder: Send + Sync {
    fn embed(&self, inputs: &[String]) -> impl Future<Output = Result<Vec<Vec<f64>>>> + Send;
}

/// Embedder backed by a configured endpoint.
pub struct EndpointEmbedder<'a> {
    pub gateway: &'a Gateway,
    pub endpoint: &'a EndpointConfig,
}

impl Embedder for EndpointEmbedder<'_> {
    async fn embed(&self, inputs: &[String]) -> Result<Vec<Vec<f64>>> {
        self.gateway.embed(self.endpoint, inputs).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retry_delays_are_nondecreasing_and_capped() {
        let policy = RetryPolicy {
            max_attempts: 8,
            base_delay_ms: 100,
            max_delay_ms: 3_000,
        };
        // worst case against the adjacent window: max jitter now, min jitter next
        for attempt in 1..7 {
            let now = policy.delay_before_retry(attempt, 1.0);
            let next = policy.delay_before_retry(attempt + 1, 0.0);
            assert!(next >= now, "attempt {attempt}: {now:?} then {next:?}");
            assert!(now <= Duration::from_millis(3_000));
        }
        assert_eq!(
            policy.delay_before_retry(7, 1.0),
            Duration::from_millis(3_000)
        );
    }

    #[test]
    fn message_sequence_rejects_multiple_images() {
        let gateway = Gateway::new();
        let endpoint = EndpointConfig::local("m", "http://127.0.0.1:1", "m");
        let seq = MessageSequence::new(vec![Message {
            role: Role::User,
            parts: vec![
                MessagePart::ImageBytes {
                    media_type: "image/png".into(),
                    data: vec![1],
                },
                MessagePart::ImageBytes {
                    media_type: "image/png".into(),
                    data: vec![2],
                },
            ],
        }]);
        assert!(gateway.chat_body(&endpoint, &seq).is_err());
    }

    #[test]
    fn chat_body_is_deterministic() {
        let gateway = Gateway::new();
        let endpoint = EndpointConfig::local("m", "http://127.0.0.1:1", "mock-model");
        let seq = MessageSequence::user_text("hello");
        let a = gateway.chat_body(&endpoint, &seq).unwrap();
        let b = gateway.chat_body(&endpoint, &seq).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"model\":\"mock-model\""));
        assert!(a.contains("\"content\":\"hello\""));
    }

    #[test]
    fn endpoint_validation_catches_bad_bounds() {
        let mut e = EndpointConfig::local("x", "http://h", "m");
        e.max_in_flight = 0;
        assert!(e.validate().is_err());
        e.max_in_flight = 1;
        e.timeout_secs = 0.0;
        assert!(e.validate().is_err());
    }
}
