//! HTTP clients for the optional external endpoints. None of them is
//! needed: an unset URL means the local implementation is used, and a
//! failing endpoint degrades to it with a recorded warning.
//!
//! The engine's extension traits are synchronous, so each call blocks on
//! the runtime handle. Callers must be on a blocking thread (the service
//! runs every session input under `spawn_blocking`).
//!
//! Wire formats (all JSON over POST):
//! - extractor: `{text, turn, received_at, latency_ms}` -> `ExtractionResult`
//! - reranker: `{candidates, belief_argmax, turn}` -> `{scale_ids: [..]}`
//! - rewriter: `{text, phase}` -> `{text}`
//! - webhook: receives `{event, session_id, seq, r, at}`, reply ignored

use std::sync::Arc;
use std::time::Duration;

use reqwest::Client;
use tokio::runtime::Handle;
use scalewise_core::config::Timeouts;
use scalewise_core::extraction::{extract_signals, ExtractionOutcome, ExtractionSource, Utterance};
use scalewise_core::recommend::{RerankError, RerankRequest};
use scalewise_core::{Engine, ExtractionResult, Extractor, Reranker, ScaleId, SessionPhase};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Endpoints {
    pub extractor: Option<String>,
    pub reranker: Option<String>,
    pub rewriter: Option<String>,
    pub webhook: Option<String>,
}

/// One POST with a JSON body, decoding a JSON reply.
#[derive(Clone)]
struct Caller {
    client: Client,
    handle: Handle,
}

impl Caller {
    fn post<T: Serialize + ?Sized, R: serde::de::DeserializeOwned>(&self, url: &str, body: &T, timeout_ms: u64) -> Result<R, String> {
        let request = self.client.post(url).timeout(Duration::from_millis(timeout_ms.max(1))).json(body);
        self.handle.block_on(async move {
            let resp = request.send().await.and_then(|r| r.error_for_status()).map_err(|e| e.to_string())?;
            resp.json::<R>().await.map_err(|e| e.to_string())
        })
    }

    fn post_ignoring_reply<T: Serialize + ?Sized>(&self, url: &str, body: &T, timeout_ms: u64) -> Result<(), String> {
        let request = self.client.post(url).timeout(Duration::from_millis(timeout_ms.max(1))).json(body);
        self.handle.block_on(async move {
            request.send().await.and_then(|r| r.error_for_status()).map(|_| ()).map_err(|e| e.to_string())
        })
    }
}

pub struct HttpExtractor {
    client: Caller,
    url: String,
    timeout_ms: u64,
    engine: Arc<Engine>,
}

impl HttpExtractor {
    fn new(client: Caller, url: impl Into<String>, engine: Arc<Engine>) -> Self {
        let timeout_ms = engine.config().timeouts.extractor_ms;
        Self { client, url: url.into(), timeout_ms, engine }
    }

    fn call(&self, u: &Utterance) -> Result<ExtractionResult, String> {
        self.client.post(&self.url, u, self.timeout_ms)
    }
}

impl Extractor for HttpExtractor {
    fn extract(&self, u: &Utterance) -> ExtractionOutcome {
        match self.call(u) {
            Ok(result) => ExtractionOutcome { result, source: ExtractionSource::External, warnings: Vec::new() },
            Err(e) => {
                tracing::warn!(url = %self.url, error = %e, "extractor unavailable");
                ExtractionOutcome {
                    result: extract_signals(u, self.engine.lexicon()),
                    source: ExtractionSource::LexiconFallback,
                    warnings: vec![format!("extractor unavailable: {e}")],
                }
            }
        }
    }
}

#[derive(Deserialize)]
struct RerankReply {
    scale_ids: Vec<ScaleId>,
}

pub struct HttpReranker {
    client: Caller,
    url: String,
    timeout_ms: u64,
}

impl HttpReranker {
    fn new(client: Caller, url: impl Into<String>, timeouts: &Timeouts) -> Self {
        Self { client, url: url.into(), timeout_ms: timeouts.reranker_ms }
    }
}

impl Reranker for HttpReranker {
    fn name(&self) -> &str {
        "http"
    }

    fn rerank(&self, request: &RerankRequest) -> Result<Vec<ScaleId>, RerankError> {
        let reply: RerankReply = self.client.post(&self.url, request, self.timeout_ms).map_err(RerankError)?;
        Ok(reply.scale_ids)
    }
}

#[derive(Deserialize)]
struct RewriteReply {
    text: String,
}

/// Rewrites surface text only. Decisions are already made and audited by
/// the time this runs, so a failure just keeps the template text.
pub struct Rewriter {
    client: Caller,
    url: String,
    timeout_ms: u64,
}

impl Rewriter {
    fn new(client: Caller, url: impl Into<String>, timeouts: &Timeouts) -> Self {
        Self { client, url: url.into(), timeout_ms: timeouts.rewriter_ms }
    }

    pub fn rewrite(&self, text: &str, phase: SessionPhase) -> String {
        if !matches!(phase, SessionPhase::Exploration | SessionPhase::Refinement) || text.is_empty() {
            return text.to_owned();
        }
        let reply: Result<RewriteReply, String> = self.client.post(&self.url, &json!({ "text": text, "phase": phase }), self.timeout_ms);
        match reply {
            Ok(r) if !r.text.trim().is_empty() => r.text,
            Ok(_) => text.to_owned(),
            Err(e) => {
                tracing::warn!(url = %self.url, error = %e, "rewriter unavailable");
                text.to_owned()
            }
        }
    }
}

pub struct Webhook {
    client: Caller,
    url: String,
    timeout_ms: u64,
}

impl Webhook {
    fn new(client: Caller, url: impl Into<String>, timeouts: &Timeouts) -> Self {
        Self { client, url: url.into(), timeout_ms: timeouts.webhook_ms }
    }

    pub fn notify(&self, payload: &Value) -> Result<(), String> {
        self.client.post_ignoring_reply(&self.url, payload, self.timeout_ms)
    }
}

/// Clients for whichever endpoints are configured.
#[derive(Clone)]
pub struct Remote {
    client: Caller,
    endpoints: Endpoints,
}

impl Remote {
    /// `handle` is the runtime the requests are driven on.
    pub fn new(endpoints: Endpoints, handle: Handle) -> Self {
        Self { client: Caller { client: Client::new(), handle }, endpoints }
    }

    pub fn endpoints(&self) -> &Endpoints {
        &self.endpoints
    }

    pub fn extractor(&self, engine: &Arc<Engine>) -> Option<HttpExtractor> {
        let url = self.endpoints.extractor.as_ref()?;
        Some(HttpExtractor::new(self.client.clone(), url, Arc::clone(engine)))
    }

    pub fn reranker(&self, timeouts: &Timeouts) -> Option<HttpReranker> {
        let url = self.endpoints.reranker.as_ref()?;
        Some(HttpReranker::new(self.client.clone(), url, timeouts))
    }

    pub fn rewriter(&self, timeouts: &Timeouts) -> Option<Rewriter> {
        let url = self.endpoints.rewriter.as_ref()?;
        Some(Rewriter::new(self.client.clone(), url, timeouts))
    }

    pub fn webhook(&self, timeouts: &Timeouts) -> Option<Webhook> {
        let url = self.endpoints.webhook.as_ref()?;
        Some(Webhook::new(self.client.clone(), url, timeouts))
    }
}
