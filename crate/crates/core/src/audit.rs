//! Append-only, hash-chained decision log.
//!
//! Each event's hash is SHA-256 over
//! `seq (u64, big-endian) || prev_hash (32 raw bytes) || canonical JSON of
//! {kind, payload, session_id, turn}`. The first event chains from 32 zero
//! bytes. On disk an event is one canonical JSON object per line.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::canonical::{self, CanonicalError};

pub const HASH_ALGORITHM: &str = "sha-256";
pub const GENESIS_PREV_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Utterance,
    Extraction,
    ContextCommit,
    Confidence,
    RefinementSelected,
    Scores,
    Recommendation,
    RiskVerdict,
    Override,
    ScaleStarted,
    ScaleResponse,
    ScaleResult,
    PhaseTransition,
    Warning,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Utterance => "utterance",
            Self::Extraction => "extraction",
            Self::ContextCommit => "context_commit",
            Self::Confidence => "confidence",
            Self::RefinementSelected => "refinement_selected",
            Self::Scores => "scores",
            Self::Recommendation => "recommendation",
            Self::RiskVerdict => "risk_verdict",
            Self::Override => "override",
            Self::ScaleStarted => "scale_started",
            Self::ScaleResponse => "scale_response",
            Self::ScaleResult => "scale_result",
            Self::PhaseTransition => "phase_transition",
            Self::Warning => "warning",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub session_id: String,
    pub turn: u64,
    pub kind: EventKind,
    pub payload: Value,
    pub prev_hash: String,
    pub hash: String,
}

impl AuditEvent {
    /// Canonical single-line encoding (no trailing newline).
    pub fn to_line(&self) -> String {
        canonical::to_canonical_string(self).unwrap_or_default()
    }

    pub fn from_line(line: &str) -> Result<Self, String> {
        serde_json::from_str(line).map_err(|e| format!("{e}"))
    }

    pub fn compute_hash(&self) -> Result<String, String> {
        chain_hash(self.seq, &self.prev_hash, &self.session_id, self.turn, self.kind, &self.payload)
    }
}

fn chain_hash(seq: u64, prev_hash: &str, session_id: &str, turn: u64, kind: EventKind, payload: &Value) -> Result<String, String> {
    let prev = hex::decode(prev_hash).map_err(|e| format!("prev_hash: {e}"))?;
    if prev.len() != 32 {
        return Err(format!("prev_hash has {} bytes", prev.len()));
    }
    let body = json!({ "kind": kind, "payload": payload, "session_id": session_id, "turn": turn });
    let mut hasher = Sha256::new();
    hasher.update(seq.to_be_bytes());
    hasher.update(&prev);
    hasher.update(canonical::value_to_canonical_string(&body).as_bytes());
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkError(pub String);

/// Durable storage for events. `append` must not return before the line is
/// persisted.
pub trait AuditSink: Send {
    fn append(&mut self, event: &AuditEvent, line: &str) -> Result<(), SinkError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuditError {
    #[error("audit log is poisoned; refusing to record")]
    Poisoned,
    #[error("audit storage failed: {0}")]
    Storage(String),
    #[error("payload not encodable: {0}")]
    Encoding(String),
}

impl From<CanonicalError> for AuditError {
    fn from(e: CanonicalError) -> Self {
        Self::Encoding(format!("{e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainBreak {
    pub seq: u64,
    pub reason: String,
}

impl fmt::Display for ChainBreak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "chain broken at seq {}: {}", self.seq, self.reason)
    }
}

/// Recomputes the chain; reports the first event that does not verify.
pub fn verify(events: &[AuditEvent]) -> Result<(), ChainBreak> {
    let mut prev = String::from(GENESIS_PREV_HASH);
    let session = events.first().map(|e| e.session_id.clone());
    for (i, e) in events.iter().enumerate() {
        let brk = |reason: &str| ChainBreak { seq: i as u64, reason: reason.into() };
        if e.seq != i as u64 {
            return Err(brk("sequence number out of order"));
        }
        if Some(&e.session_id) != session.as_ref() {
            return Err(brk("session id changes mid-log"));
        }
        if e.prev_hash != prev {
            return Err(brk("prev_hash does not match previous event"));
        }
        match e.compute_hash() {
            Ok(h) if h == e.hash => {}
            Ok(_) => return Err(brk("hash mismatch")),
            Err(r) => return Err(brk(&r)),
        }
        prev = e.hash.clone();
    }
    Ok(())
}

pub struct AuditLog {
    session_id: String,
    events: Vec<AuditEvent>,
    poisoned: bool,
    sink: Option<Box<dyn AuditSink>>,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditLog")
            .field("session_id", &self.session_id)
            .field("events", &self.events.len())
            .field("poisoned", &self.poisoned)
            .finish()
    }
}

impl AuditLog {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self { session_id: session_id.into(), events: Vec::new(), poisoned: false, sink: None }
    }

    pub fn with_sink(session_id: impl Into<String>, sink: Box<dyn AuditSink>) -> Self {
        Self { sink: Some(sink), ..Self::new(session_id) }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn events(&self) -> &[AuditEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    /// Appends one event and hands it to the sink before returning.
    pub fn record<T: Serialize + ?Sized>(&mut self, turn: u64, kind: EventKind, payload: &T) -> Result<u64, AuditError> {
        if self.poisoned {
            return Err(AuditError::Poisoned);
        }
        let payload = canonical::to_canonical_value(payload)?;
        let seq = self.events.len() as u64;
        let prev_hash = self.events.last().map_or_else(|| String::from(GENESIS_PREV_HASH), |e| e.hash.clone());
        let hash = chain_hash(seq, &prev_hash, &self.session_id, turn, kind, &payload).map_err(AuditError::Encoding)?;
        let event = AuditEvent { seq, session_id: self.session_id.clone(), turn, kind, payload, prev_hash, hash };
        if let Some(sink) = self.sink.as_mut() {
            if let Err(SinkError(msg)) = sink.append(&event, &event.to_line()) {
                self.poisoned = true;
                return Err(AuditError::Storage(msg));
            }
        }
        self.events.push(event);
        Ok(seq)
    }

    /// Verifies the in-memory chain; a failure poisons the log.
    pub fn verify(&mut self) -> Result<(), ChainBreak> {
        let r = verify(&self.events);
        if r.is_err() {
            self.poisoned = true;
        }
        r
    }

    #[cfg(test)]
    pub(crate) fn events_mut(&mut self) -> &mut Vec<AuditEvent> {
        &mut self.events
    }
}

/// Event pushed to session subscribers, derived from audit events.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub data: Value,
}

impl StreamEvent {
    /// Maps the audit kinds that subscribers see; others return `None`.
    pub fn from_audit(event: &AuditEvent) -> Option<Self> {
        let p = &event.payload;
        let (kind, data) = match event.kind {
            EventKind::RiskVerdict => {
                let v = &p["verdict"];
                (
                    "risk",
                    json!({
                        "r": v["r"],
                        "level": p["effective_level"],
                        "raw_level": v["level"],
                        "evaluated_version": v["evaluated_version"],
                    }),
                )
            }
            EventKind::PhaseTransition => ("phase_transition", json!({ "from": p["from"], "to": p["to"] })),
            EventKind::Recommendation => ("recommendation", p.clone()),
            EventKind::ScaleResult => ("scale_result", p.clone()),
            _ => return None,
        };
        Some(Self { seq: event.seq, kind: kind.into(), data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::sync::Arc;
    use alloc::vec;
    use core::sync::atomic::{AtomicBool, Ordering};

    fn filled(n: u64) -> AuditLog {
        let mut log = AuditLog::new("sess");
        for i in 0..n {
            log.record(i, EventKind::Utterance, &json!({"text": "same", "n": i % 2})).unwrap();
        }
        log
    }

    #[test]
    fn genesis_rule() {
        let log = filled(1);
        let e = &log.events()[0];
        assert_eq!(e.seq, 0);
        assert_eq!(e.prev_hash, GENESIS_PREV_HASH);
        assert_eq!(hex::decode(&e.prev_hash).unwrap(), vec![0u8; 32]);
    }

    #[test]
    fn identical_payloads_hash_differently() {
        let mut log = AuditLog::new("s");
        log.record(0, EventKind::Warning, &json!({"m": 1})).unwrap();
        log.record(0, EventKind::Warning, &json!({"m": 1})).unwrap();
        let [a, b] = log.events() else { panic!() };
        assert_ne!(a.seq, b.seq);
        assert_ne!(a.hash, b.hash);
    }

    #[test]
    fn verify_clean_tampered_and_empty() {
        assert!(verify(&[]).is_ok());
        let mut log = filled(8);
        assert!(log.verify().is_ok());
        log.events_mut()[5].payload["text"] = Value::String("samf".into());
        assert_eq!(log.verify().unwrap_err().seq, 5);
        assert!(log.is_poisoned());
        assert_eq!(log.record(9, EventKind::Warning, &json!({})), Err(AuditError::Poisoned));
    }

    #[test]
    fn turn_and_kind_are_covered() {
        let mut log = filled(4);
        log.events_mut()[2].turn = 99;
        assert_eq!(verify(log.events()).unwrap_err().seq, 2);
        let mut log = filled(4);
        log.events_mut()[3].kind = EventKind::Warning;
        assert_eq!(verify(log.events()).unwrap_err().seq, 3);
    }

    #[test]
    fn lines_round_trip() {
        let log = filled(3);
        for e in log.events() {
            let line = e.to_line();
            assert!(!line.contains('\n'));
            let back = AuditEvent::from_line(&line).unwrap();
            assert_eq!(&back, e);
            assert_eq!(back.to_line(), line);
        }
    }

    struct FlakySink(Arc<AtomicBool>);
    impl AuditSink for FlakySink {
        fn append(&mut self, _: &AuditEvent, _: &str) -> Result<(), SinkError> {
            if self.0.load(Ordering::SeqCst) {
                Err(SinkError("disk full".into()))
            } else {
                Ok(())
            }
        }
    }

    #[test]
    fn storage_failure_is_loud_and_poisons() {
        let fail = Arc::new(AtomicBool::new(false));
        let mut log = AuditLog::with_sink("s", Box::new(FlakySink(fail.clone())));
        log.record(0, EventKind::Warning, &json!({})).unwrap();
        fail.store(true, Ordering::SeqCst);
        assert_eq!(log.record(0, EventKind::Warning, &json!({})), Err(AuditError::Storage("disk full".into())));
        assert_eq!(log.len(), 1, "failed event is not kept");
        fail.store(false, Ordering::SeqCst);
        assert_eq!(log.record(0, EventKind::Warning, &json!({})), Err(AuditError::Poisoned));
    }

    proptest::proptest! {
        #[test]
        fn chain_sound_for_any_sequence(items in proptest::collection::vec((0u64..5, 0usize..14, proptest::num::f64::NORMAL, "[a-z]{0,6}"), 0..30)) {
            const KINDS: [EventKind; 14] = [
                EventKind::Utterance, EventKind::Extraction, EventKind::ContextCommit, EventKind::Confidence,
                EventKind::RefinementSelected, EventKind::Scores, EventKind::Recommendation, EventKind::RiskVerdict,
                EventKind::Override, EventKind::ScaleStarted, EventKind::ScaleResponse, EventKind::ScaleResult,
                EventKind::PhaseTransition, EventKind::Warning,
            ];
            let mut log = AuditLog::new("p");
            for (turn, k, x, s) in &items {
                log.record(*turn, KINDS[*k], &json!({"x": x, "s": s})).unwrap();
            }
            proptest::prop_assert!(verify(log.events()).is_ok());
            for e in log.events() {
                let back = AuditEvent::from_line(&e.to_line()).unwrap();
                proptest::prop_assert_eq!(back.compute_hash().unwrap(), e.hash.clone());
            }
        }
    }
}
