//! The single choke-point for model traffic.
//!
//! [`Gateway`] runs in one of three modes:
//!
//! * `live`: every request goes to the transport, nothing is persisted;
//! * `record`: existing fixtures are served as-is, missing ones are fetched
//!   from the transport and written to the fixture directory;
//! * `replay`: every request is answered from the fixture directory and the
//!   transport is never touched. A missing fixture is a [`GatewayError::FixtureMiss`].
//!
//! Responses are cached in memory per fingerprint for the lifetime of the
//! gateway, and concurrent identical requests are collapsed into a single
//! transport call. The first response seen for a digest wins; fixture files
//! are only replaced when the gateway is built with `overwrite`.

mod fingerprint;
mod http;
mod store;
mod transport;
mod types;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, OnceLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use fingerprint::{
    canonical_json, chat_request_value, embedding_request_value, fingerprint_chat, fingerprint_embedding,
    fingerprint_value, RequestFingerprint,
};
pub use http::{HttpTransport, RetryPolicy, DEFAULT_API_KEY_ENV};
pub use store::{FixtureRecord, FixtureStore};
pub use transport::{FnTransport, Transport};
pub use types::{
    ChatRequest, ChatResponse, EmbeddingRequest, EmbeddingVector, FinishReason, Message, Role, Usage,
};

pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("no fixture recorded for request {digest}")]
    FixtureMiss { digest: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider refused the request: {0}")]
    Refusal(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("fixture store error at {path}: {reason}")]
    Store { path: String, reason: String },
    #[error("corrupt fixture {path}: {reason}")]
    CorruptFixture { path: String, reason: String },
    #[error("gateway in {0} mode needs a transport")]
    NoTransport(GatewayMode),
    #[error("gateway in {0} mode needs a fixture directory")]
    NoStore(GatewayMode),
}

impl GatewayError {
    pub fn is_fixture_miss(&self) -> bool {
        matches!(self, GatewayError::FixtureMiss { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

impl fmt::Display for GatewayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatewayMode::Live => "live",
            GatewayMode::Record => "record",
            GatewayMode::Replay => "replay",
        })
    }
}

impl FromStr for GatewayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(GatewayMode::Live),
            "record" => Ok(GatewayMode::Record),
            "replay" => Ok(GatewayMode::Replay),
            other => Err(format!("unknown gateway mode {other:?} (expected live, record or replay)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CallKind {
    Chat,
    Embedding,
}

/// One logical request issued through the gateway.
#[derive(Debug, Clone)]
pub struct CallRecord {
    pub digest: RequestFingerprint,
    pub kind: CallKind,
    /// Served from the in-memory cache of this gateway instance.
    pub cached: bool,
    pub request: Option<ChatRequest>,
}

type Cell<T> = Arc<OnceLock<Result<T, GatewayError>>>;

pub struct Gateway {
    mode: GatewayMode,
    store: Option<FixtureStore>,
    transport: Option<Arc<dyn Transport>>,
    overwrite: bool,
    recorded_at: Option<String>,
    chat_cells: Mutex<HashMap<RequestFingerprint, Cell<ChatResponse>>>,
    embed_cells: Mutex<HashMap<RequestFingerprint, Cell<Vec<f64>>>>,
    log: Mutex<Vec<CallRecord>>,
    permits: Permits,
    transport_calls: AtomicUsize,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("store", &self.store)
            .field("has_transport", &self.transport.is_some())
            .finish()
    }
}

#[derive(Default)]
pub struct GatewayBuilder {
    mode: Option<GatewayMode>,
    store: Option<FixtureStore>,
    transport: Option<Arc<dyn Transport>>,
    parallelism: Option<usize>,
    overwrite: bool,
    recorded_at: Option<String>,
}

impl GatewayBuilder {
    pub fn fixtures(mut self, dir: impl Into<std::path::PathBuf>) -> Self {
        self.store = Some(FixtureStore::new(dir));
        self
    }

    pub fn transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn parallelism(mut self, n: usize) -> Self {
        self.parallelism = Some(n.max(1));
        self
    }

    /// Allow record mode to replace existing fixture files.
    pub fn overwrite(mut self, yes: bool) -> Self {
        self.overwrite = yes;
        self
    }

    /// Timestamp stamped into newly recorded fixtures (defaults to "unknown").
    pub fn recorded_at(mut self, stamp: impl Into<String>) -> Self {
        self.recorded_at = Some(stamp.into());
        self
    }

    pub fn build(self) -> Result<Gateway, GatewayError> {
        let mode = self.mode.unwrap_or(GatewayMode::Replay);
        if mode != GatewayMode::Replay && self.transport.is_none() {
            return Err(GatewayError::NoTransport(mode));
        }
        if mode != GatewayMode::Live && self.store.is_none() {
            return Err(GatewayError::NoStore(mode));
        }
        Ok(Gateway {
            mode,
            store: self.store,
            // Replay never talks to a transport, even if one was supplied.
            transport: if mode == GatewayMode::Replay { None } else { self.transport },
            overwrite: self.overwrite,
            recorded_at: self.recorded_at,
            chat_cells: Mutex::default(),
            embed_cells: Mutex::default(),
            log: Mutex::default(),
            permits: Permits::new(self.parallelism.unwrap_or(DEFAULT_PARALLELISM)),
            transport_calls: AtomicUsize::new(0),
        })
    }
}

impl Gateway {
    pub fn builder(mode: GatewayMode) -> GatewayBuilder {
        GatewayBuilder { mode: Some(mode), ..GatewayBuilder::default() }
    }

    pub fn replay(fixtures: impl Into<std::path::PathBuf>) -> Self {
        Self::builder(GatewayMode::Replay).fixtures(fixtures).build().expect("replay gateway")
    }

    pub fn live(transport: Arc<dyn Transport>) -> Self {
        Self::builder(GatewayMode::Live).transport(transport).build().expect("live gateway")
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn store(&self) -> Option<&FixtureStore> {
        self.store.as_ref()
    }

    /// Number of requests that reached the transport.
    pub fn transport_calls(&self) -> usize {
        self.transport_calls.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> Vec<CallRecord> {
        self.log.lock().expect("call log").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("call log").len()
    }

    /// Chat requests in issue order.
    pub fn chat_requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("call log").iter().filter_map(|c| c.request.clone()).collect()
    }

    /// Every distinct fingerprint issued so far, sorted.
    pub fn fingerprints(&self) -> BTreeSet<RequestFingerprint> {
        self.log.lock().expect("call log").iter().map(|c| c.digest.clone()).collect()
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let digest = fingerprint_chat(request);
        let cell = self.chat_cells.lock().expect("chat cache").entry(digest.clone()).or_default().clone();
        let mut computed = false;
        let result = cell
            .get_or_init(|| {
                computed = true;
                self.resolve_chat(request, &digest)
            })
            .clone();
        if computed && result.is_err() {
            // Failures are not cached, so a later call can retry.
            self.chat_cells.lock().expect("chat cache").remove(&digest);
        }
        self.log.lock().expect("call log").push(CallRecord {
            digest,
            kind: CallKind::Chat,
            cached: !computed,
            request: Some(request.clone()),
        });
        result
    }

    fn resolve_chat(&self, request: &ChatRequest, digest: &RequestFingerprint) -> Result<ChatResponse, GatewayError> {
        if self.mode != GatewayMode::Live && !(self.mode == GatewayMode::Record && self.overwrite) {
            let store = self.store.as_ref().ok_or(GatewayError::NoStore(self.mode))?;
            if let Some(record) = store.get(digest)? {
                return serde_json::from_value(record.response).map_err(|e| GatewayError::CorruptFixture {
                    path: store.path_for(digest).display().to_string(),
                    reason: e.to_string(),
                });
            }
            if self.mode == GatewayMode::Replay {
                return Err(GatewayError::FixtureMiss { digest: digest.to_string() });
            }
        }
        let transport = self.transport.as_ref().ok_or(GatewayError::NoTransport(self.mode))?;
        let response = {
            let _permit = self.permits.acquire();
            self.transport_calls.fetch_add(1, Ordering::SeqCst);
            transport.chat(request)?
        };
        match response.finish_reason {
            FinishReason::Error => return Err(GatewayError::Refusal(response.text)),
            FinishReason::Stop if response.text.is_empty() => {
                return Err(GatewayError::Transport("empty completion with finish_reason=stop".into()))
            }
            _ => {}
        }
        if self.mode == GatewayMode::Record {
            let record = FixtureRecord {
                request: chat_request_value(request),
                response: serde_json::to_value(&response).expect("response serializes"),
                recorded_at: self.stamp(),
            };
            self.store.as_ref().ok_or(GatewayError::NoStore(self.mode))?.put(digest, &record, self.overwrite)?;
        }
        Ok(response)
    }

    /// Embeds `texts` with `model_id`; one vector per input, order-aligned.
    pub fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("embedding batch must not be empty".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("embedding input {i} is empty")));
        }
        let digests: Vec<RequestFingerprint> = texts
            .iter()
            .map(|t| fingerprint_embedding(&EmbeddingRequest { model_id: model_id.into(), input: t.clone() }))
            .collect();

        let mut fresh = vec![false; texts.len()];
        let mut pending: Vec<(usize, Cell<Vec<f64>>)> = Vec::new();
        let mut seen: HashMap<&RequestFingerprint, ()> = HashMap::new();
        for (i, digest) in digests.iter().enumerate() {
            let cell = self.embed_cells.lock().expect("embed cache").entry(digest.clone()).or_default().clone();
            if cell.get().is_some() || seen.insert(digest, ()).is_some() {
                continue;
            }
            fresh[i] = true;
            if let Some(values) = self.stored_embedding(digest)? {
                let _ = cell.set(Ok(values));
            } else if self.mode == GatewayMode::Replay {
                return Err(GatewayError::FixtureMiss { digest: digest.to_string() });
            } else {
                pending.push((i, cell));
            }
        }

        if !pending.is_empty() {
            let transport = self.transport.as_ref().ok_or(GatewayError::NoTransport(self.mode))?;
            let batch: Vec<String> = pending.iter().map(|(i, _)| texts[*i].clone()).collect();
            let vectors = {
                let _permit = self.permits.acquire();
                self.transport_calls.fetch_add(1, Ordering::SeqCst);
                transport.embed(model_id, &batch)?
            };
            if vectors.len() != batch.len() {
                return Err(GatewayError::Transport(format!(
                    "embedding endpoint returned {} vectors for {} inputs",
                    vectors.len(),
                    batch.len()
                )));
            }
            check_dimensions(vectors.iter().map(Vec::len))?;
            for ((i, cell), values) in pending.into_iter().zip(vectors) {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(GatewayError::Transport(format!("embedding for input {i} has non-finite values")));
                }
                if self.mode == GatewayMode::Record {
                    let request = EmbeddingRequest { model_id: model_id.into(), input: texts[i].clone() };
                    let record = FixtureRecord {
                        request: embedding_request_value(&request),
                        response: serde_json::json!({ "values": values }),
                        recorded_at: self.stamp(),
                    };
                    self.store.as_ref().ok_or(GatewayError::NoStore(self.mode))?.put(&digests[i], &record, self.overwrite)?;
                }
                let _ = cell.set(Ok(values));
            }
        }

        let mut out = Vec::with_capacity(texts.len());
        {
            let cells = self.embed_cells.lock().expect("embed cache");
            for digest in &digests {
                let values = cells
                    .get(digest)
                    .and_then(|c| c.get())
                    .cloned()
                    .unwrap_or_else(|| Err(GatewayError::FixtureMiss { digest: digest.to_string() }))?;
                out.push(EmbeddingVector { values, model_id: model_id.into(), source_digest: digest.to_string() });
            }
        }
        check_dimensions(out.iter().map(EmbeddingVector::dim))?;
        let mut log = self.log.lock().expect("call log");
        for (digest, fresh) in digests.into_iter().zip(fresh) {
            log.push(CallRecord { digest, kind: CallKind::Embedding, cached: !fresh, request: None });
        }
        Ok(out)
    }

    fn stored_embedding(&self, digest: &RequestFingerprint) -> Result<Option<Vec<f64>>, GatewayError> {
        if self.mode == GatewayMode::Live || (self.mode == GatewayMode::Record && self.overwrite) {
            return Ok(None);
        }
        let store = self.store.as_ref().ok_or(GatewayError::NoStore(self.mode))?;
        let Some(record) = store.get(digest)? else { return Ok(None) };
        let corrupt = |reason: &str| GatewayError::CorruptFixture {
            path: store.path_for(digest).display().to_string(),
            reason: reason.to_string(),
        };
        let values = record
            .response
            .get("values")
            .and_then(Value::as_array)
            .ok_or_else(|| corrupt("missing values array"))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| corrupt("non-numeric value")))
            .collect::<Result<Vec<f64>, _>>()?;
        Ok(Some(values))
    }

    fn stamp(&self) -> String {
        self.recorded_at.clone().unwrap_or_else(|| "unknown".to_string())
    }
}

fn check_dimensions(mut dims: impl Iterator<Item = usize>) -> Result<(), GatewayError> {
    let Some(expected) = dims.next() else { return Ok(()) };
    match dims.find(|&d| d != expected) {
        Some(found) => Err(GatewayError::DimensionMismatch { expected, found }),
        None => Ok(()),
    }
}

struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Permits {
    fn new(n: usize) -> Self {
        Self { available: Mutex::new(n), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("permits");
        while *available == 0 {
            available = self.freed.wait(available).expect("permits");
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("permits") += 1;
        self.0.freed.notify_one();
    }
}

/// A chat model handle: gateway plus the decoding parameters for one role.
#[derive(Debug, Clone)]
pub struct ChatModel {
    gateway: Arc<Gateway>,
    pub model_id: String,
    pub temperature: f64,
    pub seed: Option<i64>,
    pub max_output: Option<u32>,
}

impl ChatModel {
    /// Temperature defaults to 0.0.
    pub fn new(gateway: Arc<Gateway>, model_id: impl Into<String>) -> Self {
        Self { gateway, model_id: model_id.into(), temperature: 0.0, seed: None, max_output: None }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: Option<i64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn request(&self, prompt: &str) -> ChatRequest {
        ChatRequest {
            model_id: self.model_id.clone(),
            messages: vec![Message::user(prompt)],
            temperature: self.temperature,
            seed: self.seed,
            max_output: self.max_output,
        }
    }

    /// Sends `prompt` as a single user message and returns the reply text.
    pub fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        self.gateway.chat(&self.request(prompt)).map(|r| r.text)
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    gateway: Arc<Gateway>,
    pub model_id: String,
}

impl EmbeddingModel {
    pub fn new(gateway: Arc<Gateway>, model_id: impl Into<String>) -> Self {
        Self { gateway, model_id: model_id.into() }
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        self.gateway.embed(&self.model_id, texts)
    }
}
