//! Condition beliefs, completeness confidence and information-gain
//! refinement.
//!
//! Beliefs are updated by Bayes' rule over binary attribute outcomes using
//! the knowledge base's likelihood table. The refinement question is the
//! unobserved attribute with the largest expected entropy reduction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::context::ContextState;
use crate::{AttributeId, ConditionId};

/// Evidence at or above this value counts as "present" for belief updates.
pub const PRESENT_THRESHOLD: f64 = 0.25;
/// Evidence at or below this value counts as "absent".
pub const ABSENT_THRESHOLD: f64 = -0.25;
/// Below this expected gain no refinement question is worth asking.
pub const MIN_INFO_GAIN: f64 = 1e-9;

/// Canned dialogue text authored alongside the knowledge base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Prompts {
    pub greeting: String,
    pub explore: Vec<String>,
    pub refine_fallback: String,
    pub recommend: String,
    pub no_eligible_scale: String,
    pub assessment_reminder: String,
    pub results: String,
    pub intervention: String,
    pub closed: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            greeting: "Hello. How have things been for you lately?".into(),
            explore: alloc::vec![
                "Thank you for sharing. Could you tell me more about how you have been feeling?".into(),
                "I hear you. What has been on your mind most in the past couple of weeks?".into(),
            ],
            refine_fallback: "Is there anything else about the past two weeks you would like to add?".into(),
            recommend: "Based on what you have shared, a short questionnaire could help us understand this better.".into(),
            no_eligible_scale: "Let me ask a little more before suggesting a questionnaire.".into(),
            assessment_reminder: "Let's continue with the questionnaire when you are ready.".into(),
            results: "Thank you for completing the questionnaire. Your results are ready.".into(),
            intervention: "It sounds like you may be in danger right now. Please contact local emergency services or a crisis line immediately. A human supervisor has been notified.".into(),
            closed: "This session has ended.".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub conditions: Vec<ConditionId>,
    pub attribute_vocabulary: Vec<AttributeId>,
    pub required_attributes: BTreeMap<ConditionId, BTreeSet<AttributeId>>,
    /// P(attribute present | condition), strictly inside (0, 1).
    pub likelihood: BTreeMap<ConditionId, BTreeMap<AttributeId, f64>>,
    pub prior: BTreeMap<ConditionId, f64>,
    /// Targeted question per attribute, asked during refinement.
    #[serde(default)]
    pub questions: BTreeMap<AttributeId, String>,
    #[serde(default)]
    pub prompts: Prompts,
}

fn default_schema_version() -> u32 {
    1
}

impl KnowledgeBase {
    pub fn likelihood(&self, condition: &ConditionId, attribute: &AttributeId) -> Option<f64> {
        self.likelihood.get(condition)?.get(attribute).copied()
    }

    pub fn has_attribute(&self, attribute: &AttributeId) -> bool {
        self.attribute_vocabulary.contains(attribute)
    }

    pub fn required(&self, condition: &ConditionId) -> Option<&BTreeSet<AttributeId>> {
        self.required_attributes.get(condition)
    }
}

/// Checks every knowledge-base invariant; returns one message per finding.
pub fn validate_knowledge_base(kb: &KnowledgeBase) -> Result<(), Vec<String>> {
    let mut found = Vec::new();
    if kb.conditions.is_empty() {
        found.push("no conditions".into());
    }
    let conditions: BTreeSet<_> = kb.conditions.iter().collect();
    if conditions.len() != kb.conditions.len() {
        found.push("duplicate condition id".into());
    }
    let vocab: BTreeSet<_> = kb.attribute_vocabulary.iter().collect();
    if vocab.len() != kb.attribute_vocabulary.len() {
        found.push("duplicate attribute id in vocabulary".into());
    }

    let mut prior_sum = 0.0;
    for c in &kb.conditions {
        match kb.prior.get(c) {
            Some(&p) if p > 0.0 && p < 1.0 => prior_sum += p,
            Some(&p) if kb.conditions.len() == 1 && p == 1.0 => prior_sum += p,
            Some(&p) => found.push(format!("prior of {c} = {p} outside (0, 1)")),
            None => found.push(format!("missing prior for {c}")),
        }
        for a in &kb.attribute_vocabulary {
            match kb.likelihood(c, a) {
                Some(l) if l > 0.0 && l < 1.0 => {}
                Some(l) => found.push(format!("likelihood({c}, {a}) = {l} outside (0, 1)")),
                None => found.push(format!("missing likelihood({c}, {a})")),
            }
        }
    }
    if (prior_sum - 1.0).abs() > 1e-9 {
        found.push(format!("priors sum to {prior_sum}, expected 1"));
    }
    for c in kb.prior.keys().chain(kb.likelihood.keys()).chain(kb.required_attributes.keys()) {
        if !conditions.contains(c) {
            found.push(format!("unknown condition {c}"));
        }
    }
    for (c, req) in &kb.required_attributes {
        for a in req {
            if !vocab.contains(a) {
                found.push(format!("required attribute {a} of {c} not in vocabulary"));
            }
        }
    }
    for a in kb.questions.keys() {
        if !vocab.contains(a) {
            found.push(format!("question for unknown attribute {a}"));
        }
    }
    if found.is_empty() {
        Ok(())
    } else {
        Err(found)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub probabilities: BTreeMap<ConditionId, f64>,
}

impl BeliefState {
    pub fn from_prior(kb: &KnowledgeBase) -> Self {
        Self { probabilities: kb.conditions.iter().map(|c| (c.clone(), kb.prior[c])).collect() }
    }

    pub fn uniform(conditions: &[ConditionId]) -> Self {
        let p = 1.0 / conditions.len() as f64;
        Self { probabilities: conditions.iter().map(|c| (c.clone(), p)).collect() }
    }

    /// Most probable condition; ties go to the smaller id.
    pub fn argmax(&self) -> Option<&ConditionId> {
        let mut best: Option<(&ConditionId, f64)> = None;
        // BTreeMap iterates ids ascending, so strict > keeps the smaller id on ties.
        for (c, &p) in &self.probabilities {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((c, p));
            }
        }
        best.map(|(c, _)| c)
    }

    pub fn total(&self) -> f64 {
        self.probabilities.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BeliefError {
    #[error("attribute {0} is not in the knowledge-base vocabulary")]
    UnknownAttribute(AttributeId),
    #[error("likelihood table has no entry for ({0}, {1})")]
    MissingLikelihood(ConditionId, AttributeId),
    #[error("observation has zero probability under the current belief")]
    ZeroEvidence,
}

fn outcome_likelihoods(
    belief: &BeliefState,
    attribute: &AttributeId,
    kb: &KnowledgeBase,
) -> Result<Vec<(ConditionId, f64, f64)>, BeliefError> {
    if !kb.has_attribute(attribute) {
        return Err(BeliefError::UnknownAttribute(attribute.clone()));
    }
    belief
        .probabilities
        .iter()
        .map(|(c, &p)| {
            kb.likelihood(c, attribute)
                .map(|l| (c.clone(), p, l))
                .ok_or_else(|| BeliefError::MissingLikelihood(c.clone(), attribute.clone()))
        })
        .collect()
}

fn posterior(rows: &[(ConditionId, f64, f64)], present: bool) -> Result<(BeliefState, f64), BeliefError> {
    let weights: Vec<f64> = rows.iter().map(|(_, p, l)| p * if present { *l } else { 1.0 - l }).collect();
    let evidence: f64 = weights.iter().sum();
    if !(evidence > 0.0) {
        return Err(BeliefError::ZeroEvidence);
    }
    let probabilities = rows.iter().zip(&weights).map(|((c, _, _), w)| (c.clone(), w / evidence)).collect();
    Ok((BeliefState { probabilities }, evidence))
}

/// Bayes update on a binary observation of `attribute`.
pub fn update_belief(
    belief: &BeliefState,
    attribute: &AttributeId,
    observed_present: bool,
    kb: &KnowledgeBase,
) -> Result<BeliefState, BeliefError> {
    let rows = outcome_likelihoods(belief, attribute, kb)?;
    posterior(&rows, observed_present).map(|(b, _)| b)
}

/// Shannon entropy in bits.
pub fn entropy(belief: &BeliefState) -> f64 {
    -belief.probabilities.values().filter(|&&p| p > 0.0).map(|&p| p * libm::log2(p)).sum::<f64>()
}

/// Maps continuous evidence to a binary outcome, or `None` when too weak.
pub fn evidence_outcome(value: f64) -> Option<bool> {
    if value >= PRESENT_THRESHOLD {
        Some(true)
    } else if value <= ABSENT_THRESHOLD {
        Some(false)
    } else {
        None
    }
}

/// Posterior from the prior given every decisive attribute in the context,
/// applied in vocabulary order.
pub fn belief_from_evidence(state: &ContextState, kb: &KnowledgeBase) -> Result<BeliefState, BeliefError> {
    let mut belief = BeliefState::from_prior(kb);
    for attribute in &kb.attribute_vocabulary {
        if let Some(present) = state.attributes.get(attribute).and_then(|ev| evidence_outcome(ev.value)) {
            belief = update_belief(&belief, attribute, present, kb)?;
        }
    }
    Ok(belief)
}

/// Share of the suspected condition's required attributes that have any
/// evidence entry. An empty requirement set counts as complete.
pub fn compute_confidence(state: &ContextState, belief: &BeliefState, kb: &KnowledgeBase) -> f64 {
    let Some(required) = belief.argmax().and_then(|c| kb.required(c)) else {
        return 1.0;
    };
    if required.is_empty() {
        return 1.0;
    }
    let missing = required.iter().filter(|a| !state.is_observed(a)).count();
    1.0 - missing as f64 / required.len() as f64
}

/// H(belief) minus the expected posterior entropy after observing `attribute`.
pub fn expected_info_gain(belief: &BeliefState, attribute: &AttributeId, kb: &KnowledgeBase) -> Result<f64, BeliefError> {
    let rows = outcome_likelihoods(belief, attribute, kb)?;
    let prior_entropy = entropy(belief);
    let mut expected = 0.0;
    for present in [true, false] {
        match posterior(&rows, present) {
            Ok((post, p_outcome)) => expected += p_outcome * entropy(&post),
            Err(BeliefError::ZeroEvidence) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(prior_entropy - expected)
}

/// Expected gain of every unobserved vocabulary attribute, in id order.
pub fn rank_refinement_attributes(
    belief: &BeliefState,
    state: &ContextState,
    kb: &KnowledgeBase,
) -> Result<Vec<(AttributeId, f64)>, BeliefError> {
    let mut candidates: Vec<&AttributeId> =
        kb.attribute_vocabulary.iter().filter(|a| !state.is_observed(a)).collect();
    candidates.sort();
    candidates.into_iter().map(|a| Ok((a.clone(), expected_info_gain(belief, a, kb)?))).collect()
}

/// Unobserved attribute with maximal expected gain (smallest id on ties), or
/// `None` when nothing is left to ask or no question is informative.
pub fn select_refinement_attribute(belief: &BeliefState, state: &ContextState, kb: &KnowledgeBase) -> Option<AttributeId> {
    let ranked = rank_refinement_attributes(belief, state, kb).ok()?;
    pick_refinement(&ranked)
}

pub(crate) fn pick_refinement(ranked: &[(AttributeId, f64)]) -> Option<AttributeId> {
    let mut best: Option<&(AttributeId, f64)> = None;
    for entry in ranked {
        if best.is_none_or(|b| entry.1 > b.1) {
            best = Some(entry);
        }
    }
    best.filter(|(_, ig)| *ig >= MIN_INFO_GAIN).map(|(a, _)| a.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseThresholds {
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        Self { tau_min: 0.2, tau_max: 0.8 }
    }
}

impl PhaseThresholds {
    pub fn validate(&self) -> Result<(), String> {
        if 0.0 < self.tau_min && self.tau_min < self.tau_max && self.tau_max < 1.0 {
            Ok(())
        } else {
            Err(format!("thresholds must satisfy 0 < tau_min < tau_max < 1, got {} / {}", self.tau_min, self.tau_max))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Explore,
    Refine,
    Recommend,
}

/// `conf <= tau_min` explores, `conf >= tau_max` recommends, anything
/// strictly between refines.
pub fn decide_phase(conf: f64, thresholds: &PhaseThresholds) -> Phase {
    if conf >= thresholds.tau_max {
        Phase::Recommend
    } else if conf > thresholds.tau_min {
        Phase::Refine
    } else {
        Phase::Explore
    }
}
