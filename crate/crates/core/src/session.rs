//! Session record and the phase transition function.
//!
//! Legal transitions:
//!
//! | from                                   | event                      | to             |
//! |----------------------------------------|----------------------------|----------------|
//! | Greeting/Exploration/Refinement/Recommendation/Results | TurnProcessed(p) | p (Exploration, Refinement or Recommendation) |
//! | Recommendation                         | RecommendationAccepted(id) | Assessment     |
//! | Assessment                             | AssessmentCompleted(r)     | Results        |
//! | any but Closed                         | OverrideRaised             | Intervention   |
//! | Intervention (hysteresis expired)      | OverrideCleared            | Exploration    |
//! | any but Closed                         | UserClosed                 | Closed         |

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::belief::BeliefState;
use crate::context::{apply_scale_result, ContextState, ContextStore};
use crate::recommend::Recommendation;
use crate::risk::{RiskConfig, RiskLevel, RiskVerdict};
use crate::scale::{AssessmentSession, ScaleDefinition, ScaleResult};
use crate::{AttributeId, ScaleId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    Greeting,
    Exploration,
    Refinement,
    Recommendation,
    Assessment,
    Results,
    Intervention,
    Closed,
}

impl SessionPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Greeting => "greeting",
            Self::Exploration => "exploration",
            Self::Refinement => "refinement",
            Self::Recommendation => "recommendation",
            Self::Assessment => "assessment",
            Self::Results => "results",
            Self::Intervention => "intervention",
            Self::Closed => "closed",
        }
    }
}

impl core::fmt::Display for SessionPhase {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    TurnProcessed { phase: SessionPhase },
    RecommendationAccepted { scale_id: ScaleId },
    AssessmentCompleted { result: ScaleResult },
    OverrideRaised,
    OverrideCleared,
    UserClosed,
}

impl SessionEvent {
    pub fn name(&self) -> &'static str {
        match self {
            Self::TurnProcessed { .. } => "turn_processed",
            Self::RecommendationAccepted { .. } => "recommendation_accepted",
            Self::AssessmentCompleted { .. } => "assessment_completed",
            Self::OverrideRaised => "override_raised",
            Self::OverrideCleared => "override_cleared",
            Self::UserClosed => "user_closed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("illegal transition: {event} in phase {from:?}: {reason}")]
pub struct TransitionError {
    pub from: SessionPhase,
    pub event: &'static str,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub session_id: String,
    pub phase: SessionPhase,
    pub store: ContextStore,
    pub belief: BeliefState,
    pub pending_refinement_attribute: Option<AttributeId>,
    pub active_assessment: Option<AssessmentSession>,
    /// Assessment halted by an override; kept for the record.
    pub suspended_assessment: Option<AssessmentSession>,
    pub last_recommendation: Option<Recommendation>,
    pub last_result: Option<ScaleResult>,
    pub risk_state: RiskVerdict,
}

impl Session {
    pub fn new(session_id: impl Into<String>, created_at: u64, belief: BeliefState) -> Self {
        let session_id = session_id.into();
        Self {
            store: ContextStore::new(ContextState::new(session_id.clone(), created_at)),
            session_id,
            phase: SessionPhase::Greeting,
            belief,
            pending_refinement_attribute: None,
            active_assessment: None,
            suspended_assessment: None,
            last_recommendation: None,
            last_result: None,
            risk_state: RiskVerdict::baseline(),
        }
    }

    pub fn context(&self) -> &ContextState {
        self.store.latest()
    }

    /// Override while in Intervention, otherwise the latest verdict's level.
    pub fn effective_risk_level(&self) -> RiskLevel {
        if self.phase == SessionPhase::Intervention {
            RiskLevel::Override
        } else {
            self.risk_state.level
        }
    }

    /// Whether an operator may clear the intervention now.
    pub fn override_clearable(&self, risk: &RiskConfig) -> Result<(), String> {
        if self.phase != SessionPhase::Intervention {
            return Err("no active intervention".into());
        }
        let turn = self.context().turn;
        if let Some(since) = self.risk_state.override_since {
            if turn < since + risk.hysteresis_turns {
                return Err(format!("hysteresis holds until turn {}", since + risk.hysteresis_turns));
            }
        }
        if self.risk_state.raw_override(risk) {
            return Err(format!("risk index {:.4} still above threshold", self.risk_state.r));
        }
        Ok(())
    }
}

/// Inputs a transition may need besides the session.
pub struct TransitionContext<'a> {
    pub catalog: &'a [ScaleDefinition],
    pub risk: &'a RiskConfig,
    pub now: u64,
}

/// Applies `event` to a copy of `session`; illegal events leave the input
/// untouched and return an error.
pub fn transition(session: &Session, event: &SessionEvent, ctx: &TransitionContext<'_>) -> Result<Session, TransitionError> {
    use SessionPhase::*;
    let from = session.phase;
    let reject = |reason: &str| TransitionError { from, event: event.name(), reason: reason.into() };
    if from == Closed {
        return Err(reject("session is closed"));
    }
    let mut next = session.clone();
    match event {
        SessionEvent::TurnProcessed { phase } => {
            if !matches!(from, Greeting | Exploration | Refinement | Recommendation | Results) {
                return Err(reject("turn decisions are not taken in this phase"));
            }
            if !matches!(phase, Exploration | Refinement | Recommendation) {
                return Err(reject("a turn can only lead to exploration, refinement or recommendation"));
            }
            next.phase = *phase;
            if *phase != Recommendation {
                next.last_recommendation = None;
            }
        }
        SessionEvent::RecommendationAccepted { scale_id } => {
            if from != Recommendation {
                return Err(reject("nothing has been recommended"));
            }
            if !session.last_recommendation.as_ref().is_some_and(|r| r.contains(scale_id)) {
                return Err(reject("scale was not recommended"));
            }
            let def = ctx.catalog.iter().find(|d| &d.scale_id == scale_id).ok_or_else(|| reject("scale not in catalog"))?;
            next.active_assessment = Some(AssessmentSession::start(def, ctx.now));
            next.pending_refinement_attribute = None;
            next.phase = Assessment;
        }
        SessionEvent::AssessmentCompleted { result } => {
            if from != Assessment {
                return Err(reject("no assessment in progress"));
            }
            let active = session.active_assessment.as_ref().ok_or_else(|| reject("no assessment in progress"))?;
            if active.scale_id != result.scale_id || !active.is_complete() {
                return Err(reject("result does not match the completed assessment"));
            }
            let prev = session.context();
            let applied = apply_scale_result(prev, result).map_err(|e| reject(&format!("{e}")))?;
            next.store.commit(prev.version, applied).map_err(|e| reject(&format!("{e}")))?;
            next.active_assessment = None;
            next.last_recommendation = None;
            next.last_result = Some(result.clone());
            next.phase = Results;
        }
        SessionEvent::OverrideRaised => {
            if let Some(active) = next.active_assessment.take() {
                next.suspended_assessment = Some(active);
            }
            next.last_recommendation = None;
            next.pending_refinement_attribute = None;
            next.phase = Intervention;
        }
        SessionEvent::OverrideCleared => {
            session.override_clearable(ctx.risk).map_err(|r| reject(&r))?;
            next.phase = Exploration;
        }
        SessionEvent::UserClosed => {
            if let Some(active) = next.active_assessment.take() {
                next.suspended_assessment = Some(active);
            }
            next.last_recommendation = None;
            next.phase = Closed;
        }
    }
    Ok(next)
}
