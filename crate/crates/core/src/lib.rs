//! Decision core for a conversational psychometric assessment engine.
//!
//! Everything in this crate is deterministic and free of IO: clocks, files,
//! network endpoints and threads live in the `scalewise` companion crate.
//! The crate is `no_std` and only needs `alloc`.
//!
//! Module map:
//!
//! - [`context`]: the versioned blackboard state and its update rule
//! - [`extraction`]: utterance -> structured signals (lexicon extractor)
//! - [`belief`]: condition beliefs, confidence, information-gain refinement
//! - [`recommend`]: weighted multi-criteria scale ranking and filtering
//! - [`risk`]: risk index and override verdicts
//! - [`scale`]: schema-driven scale administration and scoring
//! - [`audit`]: hash-chained append-only decision log
//! - [`session`] / [`engine`]: the session state machine and turn pipeline
//! - [`replay`]: deterministic re-execution of recorded sessions

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod audit;
pub mod belief;
pub mod canonical;
pub mod config;
pub mod context;
pub mod engine;
pub mod extraction;
pub mod fixtures;
mod ids;
pub mod recommend;
pub mod replay;
pub mod risk;
pub mod scale;
pub mod script;
pub mod session;

pub use ids::{AttributeId, ConditionId, ScaleId};

pub use audit::{AuditEvent, AuditLog, AuditSink, EventKind, StreamEvent};
pub use belief::{BeliefState, KnowledgeBase, Phase, PhaseThresholds};
pub use config::EngineConfig;
pub use context::{ContextState, ContextStore};
pub use engine::{Engine, SessionRunner, TurnResponse};
pub use extraction::{ExtractionResult, Extractor, Lexicon, LexiconExtractor};
pub use recommend::{Recommendation, Reranker, ScaleProfile, ScoringWeights};
pub use risk::{RiskConfig, RiskLevel, RiskSignals, RiskVerdict};
pub use scale::{AssessmentSession, ScaleDefinition, ScaleResult};
pub use session::{Session, SessionEvent, SessionPhase};
