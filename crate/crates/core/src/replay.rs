//! Re-executes a recorded session and compares every produced event with
//! the log.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::audit::{verify, AuditEvent, ChainBreak, EventKind};
use crate::canonical::value_to_canonical_string;
use crate::engine::{AssetDigests, Engine, EngineError, Input, SessionRunner};
use crate::extraction::{extract_signals, ExtractionOutcome, ExtractionResult, ExtractionSource, Extractor, Utterance};
use crate::recommend::{RerankError, RerankRequest, Reranker};
use crate::ScaleId;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("log is empty")]
    Empty,
    #[error("log does not verify: {0}")]
    Chain(ChainBreak),
    #[error("genesis check failed: {0}")]
    Genesis(String),
    #[error("event {seq}: unreadable input: {message}")]
    BadInput { seq: u64, message: String },
    #[error("engine failed during replay: {0}")]
    Engine(EngineError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub seq: u64,
    pub recorded: Option<String>,
    pub replayed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub session_id: String,
    pub events_checked: usize,
    pub inputs: usize,
    pub config_matches: bool,
    pub divergence: Option<Divergence>,
}

impl ReplayReport {
    pub fn is_clean(&self) -> bool {
        self.divergence.is_none()
    }
}

struct RecordedExtractor {
    engine: Arc<Engine>,
    outcomes: RefCell<VecDeque<Option<ExtractionOutcome>>>,
}

impl Extractor for RecordedExtractor {
    fn extract(&self, utterance: &Utterance) -> ExtractionOutcome {
        match self.outcomes.borrow_mut().pop_front().flatten() {
            Some(outcome) => outcome,
            None => ExtractionOutcome {
                result: extract_signals(utterance, self.engine.lexicon()),
                source: ExtractionSource::Lexicon,
                warnings: Vec::new(),
            },
        }
    }
}

struct RecordedRerank {
    name: String,
    reply: Option<Vec<ScaleId>>,
    error: Option<String>,
}

/// Hands back the recorded reranker replies in order. A session uses one
/// reranker throughout, so a single name suffices.
struct RecordedReranker {
    name: String,
    queue: RefCell<VecDeque<RecordedRerank>>,
}

impl Reranker for RecordedReranker {
    fn name(&self) -> &str {
        &self.name
    }

    fn rerank(&self, _request: &RerankRequest) -> Result<Vec<ScaleId>, RerankError> {
        let Some(r) = self.queue.borrow_mut().pop_front() else {
            return Err(RerankError("no recorded reranker reply left".into()));
        };
        match (r.reply, r.error) {
            (Some(reply), _) => Ok(reply),
            (None, e) => Err(RerankError(e.unwrap_or_default())),
        }
    }
}

fn genesis_assets(event: &AuditEvent) -> Result<(AssetDigests, u64), ReplayError> {
    if event.kind != EventKind::PhaseTransition || event.payload["cause"] != "genesis" {
        return Err(ReplayError::Genesis("first event is not a session genesis".into()));
    }
    let assets: AssetDigests = serde_json::from_value(event.payload["assets"].clone())
        .map_err(|e| ReplayError::Genesis(format!("unreadable asset digests: {e}")))?;
    let created_at = event.payload["created_at"].as_u64().ok_or_else(|| ReplayError::Genesis("missing created_at".into()))?;
    Ok((assets, created_at))
}

/// Fails unless the engine's knowledge base, lexicon and catalog are the ones
/// the log was recorded with. Returns whether the config matches too.
pub fn check_genesis(event: &AuditEvent, engine: &Engine) -> Result<bool, ReplayError> {
    let (recorded, _) = genesis_assets(event)?;
    let current = engine.digests();
    if recorded.hash_algorithm != current.hash_algorithm {
        return Err(ReplayError::Genesis(format!("hash algorithm {} is not supported", recorded.hash_algorithm)));
    }
    let mut problems = Vec::new();
    if recorded.kb != current.kb {
        problems.push(String::from("knowledge base differs"));
    }
    if recorded.lexicon != current.lexicon {
        problems.push(String::from("lexicon differs"));
    }
    if recorded.catalog != current.catalog {
        let missing: Vec<_> = recorded.scales.iter().filter(|s| !current.scales.contains(s)).map(|s| s.to_string()).collect();
        let extra: Vec<_> = current.scales.iter().filter(|s| !recorded.scales.contains(s)).map(|s| s.to_string()).collect();
        let mut msg = String::from("catalog differs");
        if !missing.is_empty() {
            msg.push_str(&format!("; missing scales: {}", missing.join(", ")));
        }
        if !extra.is_empty() {
            msg.push_str(&format!("; unexpected scales: {}", extra.join(", ")));
        }
        problems.push(msg);
    }
    if !problems.is_empty() {
        return Err(ReplayError::Genesis(problems.join("; ")));
    }
    Ok(recorded.config == current.config)
}

fn event_fingerprint(e: &AuditEvent) -> String {
    format!("{}|{}|{}", e.kind, e.turn, value_to_canonical_string(&e.payload))
}

pub fn recorded_inputs(events: &[AuditEvent]) -> Result<Vec<Input>, ReplayError> {
    events
        .iter()
        .skip(1)
        .filter_map(|e| e.payload.get("input").map(|v| (e.seq, v)))
        .map(|(seq, v)| serde_json::from_value(v.clone()).map_err(|err| ReplayError::BadInput { seq, message: err.to_string() }))
        .collect()
}

fn recorded_extractions(events: &[AuditEvent]) -> Result<VecDeque<Option<ExtractionOutcome>>, ReplayError> {
    let mut out = VecDeque::new();
    for e in events.iter().filter(|e| e.kind == EventKind::Extraction) {
        let bad = |m: String| ReplayError::BadInput { seq: e.seq, message: m };
        let source: ExtractionSource = serde_json::from_value(e.payload["source"].clone()).map_err(|x| bad(x.to_string()))?;
        if source == ExtractionSource::Lexicon {
            out.push_back(None);
            continue;
        }
        let result: ExtractionResult = serde_json::from_value(e.payload["result"].clone()).map_err(|x| bad(x.to_string()))?;
        let warnings: Vec<String> = serde_json::from_value(e.payload["warnings"].clone()).unwrap_or_default();
        out.push_back(Some(ExtractionOutcome { result, source, warnings }));
    }
    Ok(out)
}

fn recorded_reranks(events: &[AuditEvent]) -> VecDeque<RecordedRerank> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::Recommendation)
        .map(|e| RecordedRerank {
            name: e.payload["reranker"].as_str().unwrap_or_default().into(),
            reply: serde_json::from_value(e.payload["rerank_reply"].clone()).ok().flatten(),
            error: e.payload["rerank_error"].as_str().map(String::from),
        })
        .collect()
}

/// Verifies the chain, checks genesis, re-drives every recorded input and
/// reports the first event whose kind, turn or canonical payload differs.
pub fn replay(events: &[AuditEvent], engine: Arc<Engine>) -> Result<ReplayReport, ReplayError> {
    let genesis = events.first().ok_or(ReplayError::Empty)?;
    verify(events).map_err(ReplayError::Chain)?;
    let config_matches = check_genesis(genesis, &engine)?;
    let (_, created_at) = genesis_assets(genesis)?;
    let inputs = recorded_inputs(events)?;

    let reranks = recorded_reranks(events);
    let external_rerank = reranks.iter().find(|r| r.name != "identity").map(|r| r.name.clone());
    let mut runner = SessionRunner::new(Arc::clone(&engine), genesis.session_id.clone(), created_at, None)
        .map_err(ReplayError::Engine)?
        .with_extractor(Box::new(RecordedExtractor {
            engine: Arc::clone(&engine),
            outcomes: RefCell::new(recorded_extractions(events)?),
        }));
    if let Some(name) = external_rerank {
        runner = runner.with_reranker(Box::new(RecordedReranker { name, queue: RefCell::new(reranks) }));
    }

    for input in &inputs {
        match runner.apply(input.clone()) {
            Ok(_) | Err(EngineError::Rejected(_)) | Err(EngineError::Closed) => {}
            Err(e) => return Err(ReplayError::Engine(e)),
        }
    }

    let replayed = runner.audit().events();
    let n = events.len().max(replayed.len());
    let mut divergence = None;
    for i in 1..n {
        let (a, b) = (events.get(i), replayed.get(i));
        let fa = a.map(event_fingerprint);
        let fb = b.map(event_fingerprint);
        if fa != fb {
            divergence = Some(Divergence { seq: i as u64, recorded: fa, replayed: fb });
            break;
        }
    }
    Ok(ReplayReport {
        session_id: genesis.session_id.clone(),
        events_checked: events.len().saturating_sub(1),
        inputs: inputs.len(),
        config_matches,
        divergence,
    })
}
