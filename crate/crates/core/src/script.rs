//! Scripted persona sessions: a list of user actions driven through a
//! [`SessionRunner`] on a synthetic clock.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::audit::AuditSink;
use crate::engine::{Engine, EngineError, Input, Reply, SessionRunner};
use crate::risk::RiskLevel;
use crate::session::SessionPhase;
use crate::{AttributeId, ScaleId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Step {
    Say {
        text: String,
        #[serde(default)]
        latency_ms: u64,
    },
    /// Accept the first scale of the current recommendation.
    AcceptTop,
    Accept { scale_id: ScaleId },
    /// Answer the next items in order with these option values.
    Answer { values: Vec<i64> },
    ClearOverride,
    Close,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default = "default_start")]
    pub start_at: u64,
    #[serde(default = "default_step")]
    pub step_ms: u64,
    pub steps: Vec<Step>,
}

fn default_start() -> u64 {
    1_700_000_000_000
}

fn default_step() -> u64 {
    1_000
}

impl Script {
    pub fn session_id(&self) -> String {
        format!("sim-{}", self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub action: String,
    pub turn: u64,
    pub phase: SessionPhase,
    pub risk_level: RiskLevel,
    pub reply_text: Option<String>,
    pub asked_attribute: Option<AttributeId>,
    pub recommended: Vec<ScaleId>,
    pub item: Option<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub turns: u64,
    pub refine_turns: u64,
    pub first_refinement_turn: Option<u64>,
    pub first_recommendation_turn: Option<u64>,
    pub override_turns: Vec<u64>,
    pub assessments_completed: usize,
    pub rejected_inputs: usize,
    pub results: Vec<(ScaleId, i64, String)>,
    pub final_phase: Option<SessionPhase>,
    pub audit_events: usize,
}

#[derive(Debug)]
pub struct ScriptRun {
    pub runner: SessionRunner,
    pub trace: Vec<TraceEntry>,
    pub metrics: Metrics,
}

/// Runs every step; rejected inputs are traced and the script continues.
/// Any other engine failure aborts the run.
pub fn run_script(engine: Arc<Engine>, script: &Script, sink: Option<Box<dyn AuditSink>>) -> Result<ScriptRun, EngineError> {
    let runner = SessionRunner::new(engine, script.session_id(), script.start_at, sink)?;
    drive(runner, script)
}

/// Like [`run_script`] on an already opened runner.
pub fn drive(mut runner: SessionRunner, script: &Script) -> Result<ScriptRun, EngineError> {
    let mut trace = Vec::new();
    let mut metrics = Metrics::default();
    let mut clock = script.start_at;
    for (i, step) in script.steps.iter().enumerate() {
        clock += script.step_ms;
        let inputs: Vec<Input> = match step {
            Step::Say { text, latency_ms } => alloc::vec![Input::Turn { text: text.clone(), latency_ms: *latency_ms, at: clock }],
            Step::AcceptTop => {
                let id = runner
                    .session
                    .last_recommendation
                    .as_ref()
                    .and_then(|r| r.scales.first())
                    .map(|c| c.scale_id.clone())
                    .unwrap_or_else(|| ScaleId::from(""));
                alloc::vec![Input::Accept { scale_id: id, at: clock }]
            }
            Step::Accept { scale_id } => alloc::vec![Input::Accept { scale_id: scale_id.clone(), at: clock }],
            Step::Answer { values } => values
                .iter()
                .map(|&value| Input::Respond { item_id: String::new(), value, at: clock })
                .collect(),
            Step::ClearOverride => alloc::vec![Input::ClearOverride { at: clock }],
            Step::Close => alloc::vec![Input::Close { at: clock }],
        };
        for mut input in inputs {
            if let Input::Respond { item_id, .. } = &mut input {
                *item_id = runner.assessment_status().item.map(|it| it.item_id).unwrap_or_default();
            }
            let action = step_name(step);
            let before_phase = runner.session.phase;
            let outcome = runner.apply(input);
            let s = &runner.session;
            let mut entry = TraceEntry {
                step: i,
                action: action.into(),
                turn: s.context().turn,
                phase: s.phase,
                risk_level: s.effective_risk_level(),
                reply_text: None,
                asked_attribute: None,
                recommended: Vec::new(),
                item: runner.assessment_status().item.map(|it| it.item_id),
                error: None,
            };
            match outcome {
                Ok(Reply::Turn(resp)) => {
                    entry.reply_text = Some(resp.reply_text);
                    if let Some(rec) = &resp.recommendation {
                        entry.recommended = rec.scales.iter().map(|c| c.scale_id.clone()).collect();
                    }
                    if matches!(step, Step::Say { .. }) {
                        metrics.turns += 1;
                        let turn = resp.turn;
                        match resp.phase {
                            SessionPhase::Refinement => {
                                metrics.refine_turns += 1;
                                metrics.first_refinement_turn.get_or_insert(turn);
                                entry.asked_attribute = s.pending_refinement_attribute.clone();
                            }
                            SessionPhase::Recommendation if resp.recommendation.is_some() => {
                                metrics.first_recommendation_turn.get_or_insert(turn);
                            }
                            SessionPhase::Intervention if before_phase != SessionPhase::Intervention => {
                                metrics.override_turns.push(turn);
                            }
                            _ => {}
                        }
                    }
                }
                Ok(Reply::Assessment(status)) => {
                    if before_phase == SessionPhase::Assessment && status.phase != SessionPhase::Assessment {
                        if let Some(r) = &status.result {
                            metrics.assessments_completed += 1;
                            metrics.results.push((r.scale_id.clone(), r.total_score, r.band_label.clone()));
                        }
                    }
                    if status.phase == SessionPhase::Intervention && before_phase != SessionPhase::Intervention {
                        metrics.override_turns.push(s.context().turn);
                    }
                }
                Ok(Reply::Raised(_)) => {}
                Err(e @ (EngineError::Rejected(_) | EngineError::Closed)) => {
                    metrics.rejected_inputs += 1;
                    entry.error = Some(e.to_string());
                }
                Err(e) => return Err(e),
            }
            trace.push(entry);
        }
    }
    metrics.final_phase = Some(runner.session.phase);
    metrics.audit_events = runner.audit().len();
    Ok(ScriptRun { runner, trace, metrics })
}

fn step_name(step: &Step) -> &'static str {
    match step {
        Step::Say { .. } => "say",
        Step::AcceptTop => "accept_top",
        Step::Accept { .. } => "accept",
        Step::Answer { .. } => "answer",
        Step::ClearOverride => "clear_override",
        Step::Close => "close",
    }
}
