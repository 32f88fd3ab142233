//! The per-session turn pipeline.
//!
//! An [`Engine`] holds the validated, immutable assets shared by every
//! session. A [`SessionRunner`] is the single writer for one session: every
//! externally driven [`Input`] goes through [`SessionRunner::apply`], which
//! mutates the session and appends audit events in a fixed order. The first
//! event produced for an input carries it under an `input` key so the log
//! alone is enough to re-drive the session.

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audit::{AuditError, AuditLog, AuditSink, EventKind, HASH_ALGORITHM};
use crate::belief::{
    belief_from_evidence, compute_confidence, decide_phase, pick_refinement, rank_refinement_attributes,
    validate_knowledge_base, BeliefError, KnowledgeBase, Phase,
};
use crate::canonical::digest_hex;
use crate::config::EngineConfig;
use crate::context::{context_dimension, context_vector, update_context, BehavioralSample, CommitConflict, ContextState};
use crate::extraction::{extract_signals, ExtractionOutcome, ExtractionSource, Extractor, Lexicon, Utterance};
use crate::recommend::{
    finalize_recommendation, score_candidates, IdentityReranker, RecommendError, Recommendation, Reranker, ScaleProfile,
};
use crate::risk::{evaluate, RiskLevel};
use crate::scale::{next_item, score_scale, submit_response, validate_scale_definition, Item, ScaleDefinition, ScaleResult};
use crate::session::{transition, Session, SessionEvent, SessionPhase, TransitionContext};
use crate::ScaleId;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid engine assets: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("session is closed")]
    Closed,
    #[error("rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("context commit failed after retry: {0}")]
    Commit(CommitConflict),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Recommend(#[from] RecommendError),
}

/// Digests of every asset a session depends on; recorded at genesis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetDigests {
    pub hash_algorithm: String,
    pub kb: String,
    pub lexicon: String,
    pub catalog: String,
    pub config: String,
    pub scales: Vec<ScaleId>,
}

pub struct Engine {
    kb: KnowledgeBase,
    lexicon: Lexicon,
    catalog: Vec<ScaleDefinition>,
    profiles: Vec<ScaleProfile>,
    config: EngineConfig,
    digests: AssetDigests,
}

impl core::fmt::Debug for Engine {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Engine").field("digests", &self.digests).finish_non_exhaustive()
    }
}

impl Engine {
    /// Validates every asset against the others. The catalog is kept sorted
    /// by scale id.
    pub fn new(
        kb: KnowledgeBase,
        lexicon: Lexicon,
        mut catalog: Vec<ScaleDefinition>,
        config: EngineConfig,
    ) -> Result<Self, EngineError> {
        let mut found = Vec::new();
        if let Err(v) = validate_knowledge_base(&kb) {
            found.extend(v.into_iter().map(|m| format!("knowledge base: {m}")));
        }
        if let Err(v) = config.validate() {
            found.extend(v.into_iter().map(|m| format!("config: {m}")));
        }
        for attribute in lexicon.attributes() {
            if !kb.has_attribute(attribute) {
                found.push(format!("lexicon: attribute {attribute} is not in the knowledge-base vocabulary"));
            }
        }
        if catalog.is_empty() {
            found.push("catalog: no scales".into());
        }
        let dimension = context_dimension(&kb);
        catalog.sort_by(|a, b| a.scale_id.cmp(&b.scale_id));
        for pair in catalog.windows(2) {
            if pair[0].scale_id == pair[1].scale_id {
                found.push(format!("catalog: duplicate scale id {}", pair[0].scale_id));
            }
        }
        for def in &catalog {
            if let Err(v) = validate_scale_definition(def, Some(dimension)) {
                found.extend(v.into_iter().map(|m| format!("{}: {m}", def.scale_id)));
            }
        }
        if !found.is_empty() {
            return Err(EngineError::Invalid(found));
        }
        let encode = |e: crate::canonical::CanonicalError| EngineError::Invalid(alloc::vec![e.to_string()]);
        let digests = AssetDigests {
            hash_algorithm: HASH_ALGORITHM.into(),
            kb: digest_hex(&kb).map_err(encode)?,
            lexicon: digest_hex(lexicon.document()).map_err(encode)?,
            catalog: digest_hex(&catalog).map_err(encode)?,
            config: digest_hex(&config).map_err(encode)?,
            scales: catalog.iter().map(|d| d.scale_id.clone()).collect(),
        };
        let profiles = catalog.iter().map(|d| d.profile.clone()).collect();
        Ok(Self { kb, lexicon, catalog, profiles, config, digests })
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn catalog(&self) -> &[ScaleDefinition] {
        &self.catalog
    }

    pub fn profiles(&self) -> &[ScaleProfile] {
        &self.profiles
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn digests(&self) -> &AssetDigests {
        &self.digests
    }

    pub fn scale(&self, id: &ScaleId) -> Option<&ScaleDefinition> {
        self.catalog.iter().find(|d| &d.scale_id == id)
    }
}

/// An externally driven session input. `at` is the caller's clock in
/// milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Input {
    Turn { text: String, latency_ms: u64, at: u64 },
    Accept { scale_id: ScaleId, at: u64 },
    Respond { item_id: String, value: i64, at: u64 },
    /// The asynchronous monitor saw an override on this context version.
    MonitorRaise { evaluated_version: u64, at: u64 },
    ClearOverride { at: u64 },
    Close { at: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnResponse {
    pub reply_text: String,
    pub phase: SessionPhase,
    pub recommendation: Option<Recommendation>,
    pub scale_item: Option<Item>,
    pub risk_level: RiskLevel,
    pub context_version: u64,
    pub turn: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentStatus {
    pub phase: SessionPhase,
    pub scale_id: Option<ScaleId>,
    pub item: Option<Item>,
    pub answered: usize,
    pub total: usize,
    pub result: Option<ScaleResult>,
    pub risk_level: RiskLevel,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Reply {
    Turn(TurnResponse),
    Assessment(AssessmentStatus),
    /// Monitor input; `false` when it was stale or redundant.
    Raised(bool),
}

pub struct SessionRunner {
    engine: Arc<Engine>,
    pub session: Session,
    audit: AuditLog,
    extractor: Option<Box<dyn Extractor + Send>>,
    reranker: Box<dyn Reranker + Send>,
}

impl core::fmt::Debug for SessionRunner {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SessionRunner").field("session", &self.session).field("audit", &self.audit).finish_non_exhaustive()
    }
}

impl SessionRunner {
    /// Opens a session and records its genesis event.
    pub fn new(
        engine: Arc<Engine>,
        session_id: impl Into<String>,
        created_at: u64,
        sink: Option<Box<dyn AuditSink>>,
    ) -> Result<Self, EngineError> {
        let session_id = session_id.into();
        let audit = match sink {
            Some(s) => AuditLog::with_sink(session_id.clone(), s),
            None => AuditLog::new(session_id.clone()),
        };
        let session = Session::new(session_id, created_at, crate::belief::BeliefState::from_prior(engine.kb()));
        let mut runner = Self { engine, session, audit, extractor: None, reranker: Box::new(IdentityReranker) };
        let genesis = json!({
            "from": Value::Null,
            "to": SessionPhase::Greeting,
            "cause": "genesis",
            "created_at": created_at,
            "assets": runner.engine.digests(),
        });
        runner.audit.record(0, EventKind::PhaseTransition, &genesis)?;
        Ok(runner)
    }

    /// Replaces the lexicon extractor used by default.
    pub fn with_extractor(mut self, extractor: Box<dyn Extractor + Send>) -> Self {
        self.extractor = Some(extractor);
        self
    }

    pub fn with_reranker(mut self, reranker: Box<dyn Reranker + Send>) -> Self {
        self.reranker = reranker;
        self
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn session_id(&self) -> &str {
        &self.session.session_id
    }

    pub fn greeting(&self) -> &str {
        &self.engine.kb().prompts.greeting
    }

    pub fn apply(&mut self, input: Input) -> Result<Reply, EngineError> {
        match input {
            Input::Turn { ref text, latency_ms, at } => {
                let text = text.clone();
                self.handle_turn_input(input, &text, latency_ms, at).map(Reply::Turn)
            }
            Input::Accept { ref scale_id, at } => {
                let id = scale_id.clone();
                self.accept_input(input, &id, at).map(Reply::Assessment)
            }
            Input::Respond { ref item_id, value, at } => {
                let item = item_id.clone();
                self.respond_input(input, &item, value, at).map(Reply::Assessment)
            }
            Input::MonitorRaise { evaluated_version, at } => self.raise_input(input, evaluated_version, at).map(Reply::Raised),
            Input::ClearOverride { at } => self.clear_input(input, at).map(Reply::Turn),
            Input::Close { at } => self.close_input(input, at).map(Reply::Turn),
        }
    }

    pub fn handle_turn(&mut self, text: &str, latency_ms: u64, at: u64) -> Result<TurnResponse, EngineError> {
        self.handle_turn_input(Input::Turn { text: text.into(), latency_ms, at }, text, latency_ms, at)
    }

    pub fn accept(&mut self, scale_id: &ScaleId, at: u64) -> Result<AssessmentStatus, EngineError> {
        self.accept_input(Input::Accept { scale_id: scale_id.clone(), at }, scale_id, at)
    }

    pub fn respond(&mut self, item_id: &str, value: i64, at: u64) -> Result<AssessmentStatus, EngineError> {
        self.respond_input(Input::Respond { item_id: item_id.into(), value, at }, item_id, value, at)
    }

    pub fn raise_from_monitor(&mut self, evaluated_version: u64, at: u64) -> Result<bool, EngineError> {
        self.raise_input(Input::MonitorRaise { evaluated_version, at }, evaluated_version, at)
    }

    pub fn clear_override(&mut self, at: u64) -> Result<TurnResponse, EngineError> {
        self.clear_input(Input::ClearOverride { at }, at)
    }

    pub fn close(&mut self, at: u64) -> Result<TurnResponse, EngineError> {
        self.close_input(Input::Close { at }, at)
    }

    /// Current assessment view; read-only.
    pub fn assessment_status(&self) -> AssessmentStatus {
        let s = &self.session;
        let active = s.active_assessment.as_ref();
        let def = active.and_then(|a| self.engine.scale(&a.scale_id));
        AssessmentStatus {
            phase: s.phase,
            scale_id: active.map(|a| a.scale_id.clone()),
            item: active.zip(def).and_then(|(a, d)| next_item(a, d).cloned()),
            answered: active.map_or(0, |a| a.cursor),
            total: def.map_or(0, |d| d.items.len()),
            result: s.last_result.clone(),
            risk_level: s.effective_risk_level(),
        }
    }

    fn turn(&self) -> u64 {
        self.session.context().turn
    }

    fn record<T: Serialize + ?Sized>(&mut self, kind: EventKind, payload: &T) -> Result<u64, EngineError> {
        let turn = self.turn();
        Ok(self.audit.record(turn, kind, payload)?)
    }

    fn reject(&mut self, input: &Input, error: String) -> EngineError {
        match self.record(EventKind::Warning, &json!({ "input": input, "error": error })) {
            Ok(_) => EngineError::Rejected(error),
            Err(e) => e,
        }
    }

    fn ensure_open(&self) -> Result<(), EngineError> {
        if self.session.phase == SessionPhase::Closed {
            Err(EngineError::Closed)
        } else if self.audit.is_poisoned() {
            Err(AuditError::Poisoned.into())
        } else {
            Ok(())
        }
    }

    fn step(&mut self, event: &SessionEvent, now: u64) -> Result<(), String> {
        let engine = Arc::clone(&self.engine);
        let ctx = TransitionContext { catalog: engine.catalog(), risk: &engine.config().risk, now };
        let next = transition(&self.session, event, &ctx).map_err(|e| e.to_string())?;
        self.session = next;
        Ok(())
    }

    fn phase_change(&mut self, from: SessionPhase, cause: &str, input: Option<&Input>) -> Result<(), EngineError> {
        let to = self.session.phase;
        if from == to && input.is_none() {
            return Ok(());
        }
        let mut payload = json!({ "from": from, "to": to, "cause": cause });
        if let Some(i) = input {
            payload["input"] = serde_json::to_value(i).map_err(|e| EngineError::Rejected(e.to_string()))?;
        }
        self.record(EventKind::PhaseTransition, &payload)?;
        Ok(())
    }

    fn extract(&self, utterance: &Utterance) -> ExtractionOutcome {
        let lexicon_outcome = || ExtractionOutcome {
            result: extract_signals(utterance, self.engine.lexicon()),
            source: ExtractionSource::Lexicon,
            warnings: Vec::new(),
        };
        let Some(ext) = self.extractor.as_ref() else {
            return lexicon_outcome();
        };
        let outcome = ext.extract(utterance);
        let unknown: Vec<_> =
            outcome.result.attribute_observations.keys().filter(|a| !self.engine.kb().has_attribute(a)).cloned().collect();
        let invalid = outcome.result.check_ranges().err().or_else(|| {
            (!unknown.is_empty()).then(|| format!("unknown attributes {unknown:?}"))
        });
        match invalid {
            None => {
                // Risk detection never depends on the remote side alone: lexicon
                // hits it missed are added back (idempotent, so replay agrees).
                let mut outcome = outcome;
                let local = extract_signals(utterance, self.engine.lexicon());
                let mut missing = Vec::new();
                let mut remote = outcome.result.risk_keyword_hits.clone();
                for hit in local.risk_keyword_hits {
                    match remote.iter().position(|h| *h == hit) {
                        Some(i) => {
                            remote.swap_remove(i);
                        }
                        None => missing.push(hit),
                    }
                }
                if !missing.is_empty() {
                    outcome.warnings.push(format!("lexicon risk keywords merged: {missing:?}"));
                    outcome.result.risk_keyword_hits.extend(missing);
                }
                outcome.result.word_count = local.word_count;
                outcome
            }
            Some(reason) => {
                let mut fallback = lexicon_outcome();
                fallback.source = ExtractionSource::LexiconFallback;
                fallback.warnings = outcome.warnings;
                fallback.warnings.push(format!("extractor reply rejected: {reason}"));
                fallback
            }
        }
    }

    fn commit_with_retry(
        &mut self,
        make: impl Fn(&ContextState) -> ContextState,
    ) -> Result<Arc<ContextState>, EngineError> {
        let mut conflict = None;
        for _ in 0..2 {
            let prev = self.session.store.snapshot();
            let next = make(&prev);
            match self.session.store.commit(prev.version, next) {
                Ok(s) => return Ok(s),
                Err(c) => conflict = Some(c),
            }
        }
        Err(EngineError::Commit(conflict.expect("loop ran")))
    }

    /// Synchronous risk check on the latest context; records the verdict and,
    /// on a fresh override, raises the intervention. Returns whether the
    /// session is now in intervention.
    fn check_risk(&mut self, input: Option<&Input>, now: u64) -> Result<bool, EngineError> {
        let engine = Arc::clone(&self.engine);
        let verdict = evaluate(self.session.context(), engine.lexicon(), &engine.config().risk, Some(&self.session.risk_state));
        self.session.risk_state = verdict.clone();
        let raising = verdict.level == RiskLevel::Override && self.session.phase != SessionPhase::Intervention;
        let effective = if raising { RiskLevel::Override } else { self.session.effective_risk_level() };
        let mut payload = json!({ "verdict": verdict, "effective_level": effective });
        if let Some(i) = input {
            payload["input"] = serde_json::to_value(i).map_err(|e| EngineError::Rejected(e.to_string()))?;
        }
        self.record(EventKind::RiskVerdict, &payload)?;
        if raising {
            self.raise(now)?;
        }
        Ok(self.session.phase == SessionPhase::Intervention)
    }

    fn raise(&mut self, now: u64) -> Result<(), EngineError> {
        let from = self.session.phase;
        let suspended = self.session.active_assessment.as_ref().map(|a| (a.scale_id.clone(), a.cursor));
        let payload = json!({
            "r": self.session.risk_state.r,
            "r_high": self.engine.config().risk.r_high,
            "evaluated_version": self.session.risk_state.evaluated_version,
            "from_phase": from,
            "suspended_assessment": suspended.map(|(id, cursor)| json!({ "scale_id": id, "answered": cursor })),
            "halted_recommendation": self.session.last_recommendation.is_some(),
        });
        self.record(EventKind::Override, &payload)?;
        self.step(&SessionEvent::OverrideRaised, now).map_err(EngineError::Rejected)?;
        self.phase_change(from, "override", None)
    }

    fn intervention_response(&self) -> TurnResponse {
        TurnResponse {
            reply_text: self.engine.kb().prompts.intervention.clone(),
            phase: SessionPhase::Intervention,
            recommendation: None,
            scale_item: None,
            risk_level: RiskLevel::Override,
            context_version: self.session.store.version(),
            turn: self.turn(),
        }
    }

    fn response(&self, reply_text: String) -> TurnResponse {
        let s = &self.session;
        TurnResponse {
            reply_text,
            phase: s.phase,
            recommendation: if s.phase == SessionPhase::Recommendation { s.last_recommendation.clone() } else { None },
            scale_item: if s.phase == SessionPhase::Assessment { self.assessment_status().item } else { None },
            risk_level: s.effective_risk_level(),
            context_version: s.store.version(),
            turn: self.turn(),
        }
    }

    fn handle_turn_input(&mut self, input: Input, text: &str, latency_ms: u64, at: u64) -> Result<TurnResponse, EngineError> {
        self.ensure_open()?;
        let engine = Arc::clone(&self.engine);
        let kb = engine.kb();
        let config = engine.config();
        let utterance = Utterance { text: text.into(), turn: self.turn() + 1, received_at: at, latency_ms };

        self.record(EventKind::Utterance, &json!({ "input": input }))?;
        let outcome = self.extract(&utterance);
        self.record(
            EventKind::Extraction,
            &json!({ "source": outcome.source, "result": outcome.result, "warnings": outcome.warnings }),
        )?;

        let sample = BehavioralSample { latency_ms, word_count: outcome.result.word_count, timestamp: at };
        let params = config.context_params();
        let state = self.commit_with_retry(|prev| update_context(prev, &outcome.result, &sample, &params))?;
        self.record(EventKind::ContextCommit, &json!({ "cause": "turn", "state": &*state }))?;

        if self.check_risk(None, at)? {
            return Ok(self.intervention_response());
        }
        if self.session.phase == SessionPhase::Assessment {
            return Ok(self.response(kb.prompts.assessment_reminder.clone()));
        }

        let state = self.session.store.snapshot();
        let belief = belief_from_evidence(&state, kb)?;
        let conf = compute_confidence(&state, &belief, kb);
        let suspected = belief.argmax().cloned();
        let required: BTreeSet<_> = suspected.as_ref().and_then(|c| kb.required(c)).cloned().unwrap_or_default();
        let observed: BTreeSet<_> = required.iter().filter(|a| state.is_observed(a)).cloned().collect();
        let decided = decide_phase(conf, &config.thresholds);
        self.session.belief = belief.clone();
        self.record(
            EventKind::Confidence,
            &json!({
                "belief": belief,
                "suspected": suspected,
                "conf": conf,
                "required": required,
                "observed": observed,
                "decided": decided,
            }),
        )?;

        let from = self.session.phase;
        let (target, reply) = match decided {
            Phase::Explore => {
                self.session.pending_refinement_attribute = None;
                let prompts = &kb.prompts.explore;
                let text = if prompts.is_empty() {
                    kb.prompts.refine_fallback.clone()
                } else {
                    prompts[(state.turn as usize) % prompts.len()].clone()
                };
                (SessionPhase::Exploration, text)
            }
            Phase::Refine => {
                let ranking = rank_refinement_attributes(&belief, &state, kb)?;
                let pick = pick_refinement(&ranking);
                let ig = pick.as_ref().and_then(|a| ranking.iter().find(|(x, _)| x == a)).map(|(_, g)| *g);
                self.record(
                    EventKind::RefinementSelected,
                    &json!({ "attribute": pick, "ig": ig, "ranking": ranking }),
                )?;
                let text = pick
                    .as_ref()
                    .and_then(|a| kb.questions.get(a))
                    .cloned()
                    .unwrap_or_else(|| kb.prompts.refine_fallback.clone());
                self.session.pending_refinement_attribute = pick;
                (SessionPhase::Refinement, text)
            }
            Phase::Recommend => {
                self.session.pending_refinement_attribute = None;
                let vector = context_vector(&state, kb, config.valence_window);
                let candidates = score_candidates(&vector, engine.profiles(), &config.weights, &state)?;
                self.record(EventKind::Scores, &json!({ "context_vector": vector, "candidates": candidates }))?;
                match finalize_recommendation(
                    &candidates,
                    &belief,
                    &state,
                    engine.profiles(),
                    self.reranker.as_ref(),
                    &config.selection(),
                ) {
                    Ok(rec) => {
                        self.record(EventKind::Recommendation, &rec)?;
                        self.session.last_recommendation = Some(rec);
                        (SessionPhase::Recommendation, kb.prompts.recommend.clone())
                    }
                    Err(RecommendError::NoEligibleScale) => {
                        self.record(EventKind::Warning, &json!({ "error": RecommendError::NoEligibleScale.to_string() }))?;
                        self.session.last_recommendation = None;
                        (SessionPhase::Recommendation, kb.prompts.no_eligible_scale.clone())
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        self.step(&SessionEvent::TurnProcessed { phase: target }, at).map_err(EngineError::Rejected)?;
        self.phase_change(from, "turn", None)?;
        Ok(self.response(reply))
    }

    fn accept_input(&mut self, input: Input, scale_id: &ScaleId, at: u64) -> Result<AssessmentStatus, EngineError> {
        self.ensure_open()?;
        let from = self.session.phase;
        if let Err(e) = self.step(&SessionEvent::RecommendationAccepted { scale_id: scale_id.clone() }, at) {
            return Err(self.reject(&input, e));
        }
        let total = self.engine.scale(scale_id).map_or(0, |d| d.items.len());
        self.record(EventKind::ScaleStarted, &json!({ "input": input, "scale_id": scale_id, "item_count": total }))?;
        self.phase_change(from, "accepted", None)?;
        Ok(self.assessment_status())
    }

    fn respond_input(&mut self, input: Input, item_id: &str, value: i64, at: u64) -> Result<AssessmentStatus, EngineError> {
        self.ensure_open()?;
        let engine = Arc::clone(&self.engine);
        let active = match (self.session.phase, self.session.active_assessment.clone()) {
            (SessionPhase::Assessment, Some(a)) => a,
            (phase, _) => return Err(self.reject(&input, format!("no assessment in progress (phase {phase:?})"))),
        };
        let Some(def) = engine.scale(&active.scale_id) else {
            return Err(self.reject(&input, format!("scale {} missing from catalog", active.scale_id)));
        };
        let next = match submit_response(&active, item_id, value, def, at) {
            Ok(n) => n,
            Err(e) => return Err(self.reject(&input, e.to_string())),
        };
        let complete = next.is_complete();
        self.record(
            EventKind::ScaleResponse,
            &json!({ "input": input, "scale_id": next.scale_id, "answered": next.cursor, "complete": complete }),
        )?;
        self.session.active_assessment = Some(next.clone());
        if !complete {
            return Ok(self.assessment_status());
        }

        let result = match score_scale(def, &next.responses, at) {
            Ok(r) => r,
            Err(e) => return Err(self.reject(&input, e.to_string())),
        };
        self.record(EventKind::ScaleResult, &result)?;
        let from = self.session.phase;
        self.step(&SessionEvent::AssessmentCompleted { result }, at).map_err(EngineError::Rejected)?;
        let state = self.session.store.snapshot();
        self.record(EventKind::ContextCommit, &json!({ "cause": "scale_result", "state": &*state }))?;
        self.phase_change(from, "completed", None)?;
        self.check_risk(None, at)?;
        Ok(self.assessment_status())
    }

    fn raise_input(&mut self, input: Input, evaluated_version: u64, at: u64) -> Result<bool, EngineError> {
        self.ensure_open()?;
        if self.session.phase == SessionPhase::Intervention || evaluated_version != self.session.store.version() {
            return Ok(false);
        }
        let engine = Arc::clone(&self.engine);
        let verdict = evaluate(self.session.context(), engine.lexicon(), &engine.config().risk, Some(&self.session.risk_state));
        if verdict.level != RiskLevel::Override {
            return Ok(false);
        }
        self.check_risk(Some(&input), at)
    }

    fn clear_input(&mut self, input: Input, at: u64) -> Result<TurnResponse, EngineError> {
        self.ensure_open()?;
        let from = self.session.phase;
        if let Err(e) = self.step(&SessionEvent::OverrideCleared, at) {
            return Err(self.reject(&input, e));
        }
        self.phase_change(from, "cleared", Some(&input))?;
        let text = self.engine.kb().prompts.explore.first().cloned().unwrap_or_default();
        Ok(self.response(text))
    }

    fn close_input(&mut self, input: Input, at: u64) -> Result<TurnResponse, EngineError> {
        self.ensure_open()?;
        let from = self.session.phase;
        self.step(&SessionEvent::UserClosed, at).map_err(EngineError::Rejected)?;
        self.phase_change(from, "closed", Some(&input))?;
        Ok(self.response(self.engine.kb().prompts.closed.clone()))
    }
}
