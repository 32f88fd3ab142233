//! Versioned session context (the shared blackboard state).
//!
//! A [`ContextState`] is an immutable snapshot. New versions are produced by
//! the pure functions [`update_context`] and [`apply_scale_result`] and
//! published through a [`ContextStore`], which enforces compare-and-set on
//! the version number.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::belief::KnowledgeBase;
use crate::extraction::ExtractionResult;
use crate::scale::ScaleResult;
use crate::{AttributeId, ScaleId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeEvidence {
    /// -1 confidently absent, 0 unknown, +1 confidently present.
    pub value: f64,
    pub last_observed_turn: u64,
    pub observation_count: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehavioralSummary {
    pub last_latency_ms: u64,
    pub mean_latency_ms: f64,
    pub words_per_turn: Vec<u64>,
    pub engagement_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleResultRef {
    pub scale_id: ScaleId,
    pub completed_at: u64,
    pub total_score: i64,
    pub normalized_severity: f64,
    pub band_label: String,
    /// Dialogue turn at which the result was applied; drives cooldowns.
    pub turn: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalHistory {
    pub results: Vec<ScaleResultRef>,
}

impl LongitudinalHistory {
    pub fn latest_severity(&self) -> Option<f64> {
        self.results.iter().max_by_key(|r| r.completed_at).map(|r| r.normalized_severity)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordHit {
    pub turn: u64,
    pub keyword_id: String,
}

/// Raw per-turn behavioral input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehavioralSample {
    pub latency_ms: u64,
    pub word_count: u64,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub session_id: String,
    pub version: u64,
    pub turn: u64,
    pub attributes: BTreeMap<AttributeId, AttributeEvidence>,
    pub valence_history: Vec<f64>,
    pub behavior: BehavioralSummary,
    pub history: LongitudinalHistory,
    pub risk_keyword_hits: Vec<KeywordHit>,
    pub created_at: u64,
    pub updated_at: u64,
}

impl ContextState {
    pub fn new(session_id: impl Into<String>, created_at: u64) -> Self {
        Self {
            session_id: session_id.into(),
            version: 0,
            turn: 0,
            attributes: BTreeMap::new(),
            valence_history: Vec::new(),
            behavior: BehavioralSummary::default(),
            history: LongitudinalHistory::default(),
            risk_keyword_hits: Vec::new(),
            created_at,
            updated_at: created_at,
        }
    }

    pub fn is_observed(&self, attribute: &AttributeId) -> bool {
        self.attributes.contains_key(attribute)
    }
}

/// Tunables of the context update rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextParams {
    /// EWMA smoothing; weight of the newest observation.
    pub ewma_lambda: f64,
    /// Words per turn that count as full engagement.
    pub engagement_ref_words: f64,
}

impl Default for ContextParams {
    fn default() -> Self {
        Self { ewma_lambda: 0.6, engagement_ref_words: 20.0 }
    }
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(-1.0, 1.0)
    }
}

/// Folds one user turn into the context.
pub fn update_context(
    prev: &ContextState,
    extraction: &ExtractionResult,
    behavior: &BehavioralSample,
    params: &ContextParams,
) -> ContextState {
    let lambda = params.ewma_lambda;
    let mut next = prev.clone();
    next.version = prev.version + 1;
    next.turn = prev.turn + 1;
    next.updated_at = behavior.timestamp.max(prev.updated_at);

    for (attribute, &observed) in &extraction.attribute_observations {
        let observed = clamp_unit(observed);
        next.attributes
            .entry(attribute.clone())
            .and_modify(|ev| {
                ev.value = clamp_unit(lambda * observed + (1.0 - lambda) * ev.value);
                ev.last_observed_turn = next.turn;
                ev.observation_count += 1;
            })
            .or_insert(AttributeEvidence {
                value: observed,
                last_observed_turn: next.turn,
                observation_count: 1,
            });
    }

    next.valence_history.push(clamp_unit(extraction.valence));

    for keyword in &extraction.risk_keyword_hits {
        next.risk_keyword_hits.push(KeywordHit { turn: next.turn, keyword_id: keyword.clone() });
    }

    let summary = &mut next.behavior;
    let n = summary.words_per_turn.len() as f64 + 1.0;
    summary.mean_latency_ms += (behavior.latency_ms as f64 - summary.mean_latency_ms) / n;
    summary.last_latency_ms = behavior.latency_ms;
    summary.words_per_turn.push(behavior.word_count);
    let raw = if params.engagement_ref_words > 0.0 {
        (behavior.word_count as f64 / params.engagement_ref_words).min(1.0)
    } else {
        1.0
    };
    summary.engagement_score = if prev.turn == 0 {
        raw
    } else {
        (lambda * raw + (1.0 - lambda) * summary.engagement_score).clamp(0.0, 1.0)
    };

    next
}

/// Dense context vector: attribute slots in vocabulary order, then mean
/// valence over the last `valence_window` turns, engagement and latest
/// normalized severity. Dimension is `|vocabulary| + 3`.
pub fn context_vector(state: &ContextState, kb: &KnowledgeBase, valence_window: usize) -> Vec<f64> {
    let mut v: Vec<f64> = kb
        .attribute_vocabulary
        .iter()
        .map(|a| state.attributes.get(a).map_or(0.0, |ev| ev.value))
        .collect();
    let window = valence_window.max(1);
    let recent = &state.valence_history[state.valence_history.len().saturating_sub(window)..];
    let mean_valence = if recent.is_empty() { 0.0 } else { recent.iter().sum::<f64>() / recent.len() as f64 };
    v.push(mean_valence);
    v.push(state.behavior.engagement_score);
    v.push(state.history.latest_severity().unwrap_or(0.0));
    v
}

pub fn context_dimension(kb: &KnowledgeBase) -> usize {
    kb.attribute_vocabulary.len() + 3
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContextError {
    #[error("scale result {scale_id} completed at {completed_at} was already applied")]
    DuplicateResult { scale_id: ScaleId, completed_at: u64 },
}

/// Appends a completed scale result to the longitudinal history.
pub fn apply_scale_result(prev: &ContextState, result: &ScaleResult) -> Result<ContextState, ContextError> {
    let duplicate = prev
        .history
        .results
        .iter()
        .any(|r| r.scale_id == result.scale_id && r.completed_at == result.completed_at);
    if duplicate {
        return Err(ContextError::DuplicateResult {
            scale_id: result.scale_id.clone(),
            completed_at: result.completed_at,
        });
    }
    let mut next = prev.clone();
    next.version = prev.version + 1;
    next.updated_at = prev.updated_at.max(result.completed_at);
    let entry = ScaleResultRef {
        scale_id: result.scale_id.clone(),
        completed_at: result.completed_at,
        total_score: result.total_score,
        normalized_severity: result.normalized_severity.clamp(0.0, 1.0),
        band_label: result.band_label.clone(),
        turn: prev.turn,
    };
    let at = next.history.results.partition_point(|r| r.completed_at <= entry.completed_at);
    next.history.results.insert(at, entry);
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("commit against version {expected} rejected: latest is {latest}")]
pub struct CommitConflict {
    pub expected: u64,
    pub latest: u64,
}

/// Holds the latest committed snapshot. Readers take cheap `Arc` clones and
/// may keep stale versions; writers must name the version they built on.
#[derive(Debug, Clone)]
pub struct ContextStore {
    latest: Arc<ContextState>,
}

impl ContextStore {
    pub fn new(initial: ContextState) -> Self {
        Self { latest: Arc::new(initial) }
    }

    pub fn snapshot(&self) -> Arc<ContextState> {
        Arc::clone(&self.latest)
    }

    pub fn latest(&self) -> &ContextState {
        &self.latest
    }

    pub fn version(&self) -> u64 {
        self.latest.version
    }

    pub fn commit(&mut self, expected_version: u64, next: ContextState) -> Result<Arc<ContextState>, CommitConflict> {
        let latest = self.latest.version;
        if expected_version != latest || next.version != latest + 1 {
            return Err(CommitConflict { expected: expected_version, latest });
        }
        self.latest = Arc::new(next);
        Ok(self.snapshot())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use alloc::vec;

    fn extraction(obs: &[(&str, f64)], valence: f64) -> ExtractionResult {
        ExtractionResult {
            attribute_observations: obs.iter().map(|(a, v)| (AttributeId::from(*a), *v)).collect(),
            valence,
            risk_keyword_hits: Vec::new(),
            word_count: 5,
        }
    }

    fn sample(words: u64) -> BehavioralSample {
        BehavioralSample { latency_ms: 1000, word_count: words, timestamp: 10 }
    }

    #[test]
    fn fresh_attribute_takes_observed_value() {
        let s0 = ContextState::new("s", 0);
        let s1 = update_context(&s0, &extraction(&[("low_mood", 0.8)], -0.5), &sample(5), &ContextParams::default());
        assert_eq!(s1.version, 1);
        assert_eq!(s1.turn, 1);
        assert_eq!(s1.attributes[&AttributeId::from("low_mood")].value, 0.8);
        assert_eq!(s0.version, 0, "prev untouched");
    }

    #[test]
    fn ewma_merge() {
        let p = ContextParams { ewma_lambda: 0.6, ..Default::default() };
        let s1 = update_context(&ContextState::new("s", 0), &extraction(&[("low_mood", 0.8)], 0.0), &sample(5), &p);
        let s2 = update_context(&s1, &extraction(&[("low_mood", 0.4)], 0.0), &sample(5), &p);
        let ev = &s2.attributes[&AttributeId::from("low_mood")];
        assert!((ev.value - 0.56).abs() < 1e-12);
        assert_eq!(ev.observation_count, 2);
        assert_eq!(ev.last_observed_turn, 2);
    }

    #[test]
    fn empty_extraction_advances() {
        let p = ContextParams::default();
        let s1 = update_context(&ContextState::new("s", 0), &extraction(&[("low_mood", 0.8)], -0.5), &sample(5), &p);
        let s2 = update_context(&s1, &ExtractionResult::default(), &sample(0), &p);
        assert_eq!(s2.attributes, s1.attributes);
        assert_eq!((s2.version, s2.turn), (2, 2));
        assert_eq!(s2.valence_history, vec![-0.5, 0.0]);
        assert_eq!(s2.behavior.words_per_turn, vec![5, 0]);
    }

    #[test]
    fn engagement_is_smoothed() {
        let p = ContextParams { ewma_lambda: 0.5, engagement_ref_words: 20.0 };
        let s1 = update_context(&ContextState::new("s", 0), &ExtractionResult::default(), &sample(40), &p);
        assert_eq!(s1.behavior.engagement_score, 1.0);
        let s2 = update_context(&s1, &ExtractionResult::default(), &sample(10), &p);
        assert!((s2.behavior.engagement_score - 0.75).abs() < 1e-12);
        assert!((s2.behavior.mean_latency_ms - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn vector_of_empty_state_is_zero() {
        let kb = fixtures::knowledge_base();
        let v = context_vector(&ContextState::new("s", 0), &kb, 3);
        assert_eq!(v.len(), kb.attribute_vocabulary.len() + 3);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn vector_slots_follow_vocabulary() {
        let kb = fixtures::knowledge_base();
        let mut state = ContextState::new("s", 0);
        // Insert out of vocabulary order.
        for (a, v) in [("sleep_disturbance", 0.5), ("low_mood", 0.8)] {
            state.attributes.insert(
                AttributeId::from(a),
                AttributeEvidence { value: v, last_observed_turn: 1, observation_count: 1 },
            );
        }
        state.valence_history = vec![-0.2, -0.3, -0.4];
        state.behavior.engagement_score = 1.0;

        let mut expected = vec![0.0; kb.attribute_vocabulary.len()];
        for (i, a) in kb.attribute_vocabulary.iter().enumerate() {
            if a.as_str() == "low_mood" {
                expected[i] = 0.8;
            }
            if a.as_str() == "sleep_disturbance" {
                expected[i] = 0.5;
            }
        }
        expected.extend([-0.3, 1.0, 0.0]);
        let v = context_vector(&state, &kb, 3);
        assert_eq!(v.len(), expected.len());
        for (x, y) in v.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn result(scale: &str, at: u64, severity: f64) -> ScaleResult {
        ScaleResult {
            scale_id: ScaleId::from(scale),
            total_score: 12,
            subscale_scores: BTreeMap::new(),
            band_label: "moderate".into(),
            normalized_severity: severity,
            completed_at: at,
            interpretation: None,
        }
    }

    #[test]
    fn scale_results_append_in_completion_order() {
        let s0 = ContextState::new("s", 0);
        let s1 = apply_scale_result(&s0, &result("b", 200, 0.5)).unwrap();
        assert_eq!((s1.version, s1.turn, s1.history.results.len()), (1, 0, 1));
        let s2 = apply_scale_result(&s1, &result("a", 100, 0.2)).unwrap();
        let order: Vec<_> = s2.history.results.iter().map(|r| r.scale_id.as_str()).collect();
        assert_eq!(order, ["a", "b"]);
        assert_eq!(s2.history.latest_severity(), Some(0.5));
    }

    #[test]
    fn duplicate_result_rejected() {
        let s1 = apply_scale_result(&ContextState::new("s", 0), &result("a", 100, 0.2)).unwrap();
        assert!(matches!(apply_scale_result(&s1, &result("a", 100, 0.2)), Err(ContextError::DuplicateResult { .. })));
    }

    #[test]
    fn store_rejects_stale_commits() {
        let s0 = ContextState::new("s", 0);
        let mut store = ContextStore::new(s0.clone());
        let stale = store.snapshot();
        let s1 = update_context(&s0, &ExtractionResult::default(), &sample(1), &ContextParams::default());
        store.commit(0, s1.clone()).unwrap();
        let again = update_context(&stale, &ExtractionResult::default(), &sample(1), &ContextParams::default());
        assert_eq!(store.commit(0, again), Err(CommitConflict { expected: 0, latest: 1 }));
        assert_eq!(stale.version, 0, "stale readers keep their snapshot");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]

        #[test]
        fn ewma_stays_in_bounds(
            lambda in 0.01f64..=1.0,
            obs in proptest::collection::vec(-1.0f64..=1.0, 1..30),
        ) {
            let p = ContextParams { ewma_lambda: lambda, ..Default::default() };
            let mut s = ContextState::new("s", 0);
            for (i, o) in obs.iter().enumerate() {
                s = update_context(&s, &extraction(&[("a", *o)], *o), &sample(i as u64), &p);
                let v = s.attributes[&AttributeId::from("a")].value;
                proptest::prop_assert!((-1.0..=1.0).contains(&v));
                proptest::prop_assert!((0.0..=1.0).contains(&s.behavior.engagement_score));
            }
            proptest::prop_assert_eq!(s.version, obs.len() as u64);
        }

        #[test]
        fn update_is_pure(obs in proptest::collection::vec(-1.0f64..=1.0, 0..5)) {
            let p = ContextParams::default();
            let s0 = ContextState::new("s", 0);
            let e = extraction(&[("a", obs.first().copied().unwrap_or(0.0))], 0.1);
            proptest::prop_assert_eq!(update_context(&s0, &e, &sample(3), &p), update_context(&s0, &e, &sample(3), &p));
        }
    }
}
