//! Scale ranking: a weighted sum of context adaptability (cosine similarity
//! to each scale's characteristic vector) and a burden/novelty priority,
//! followed by safety filters, an optional permutation-only reranker and
//! single or joint selection.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::belief::BeliefState;
use crate::context::ContextState;
use crate::{AttributeId, ConditionId, ScaleId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub scale_id: ScaleId,
    /// Same layout as the context vector.
    pub characteristic_vector: Vec<f64>,
    pub item_count: u32,
    pub covered_dimensions: BTreeSet<AttributeId>,
    #[serde(default)]
    pub contraindications: BTreeSet<ConditionId>,
    #[serde(default)]
    pub cooldown_turns: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringWeights {
    pub w_adapt: f64,
    pub w_priority: f64,
    pub w_len: f64,
    pub w_comp: f64,
}

impl Default for ScoringWeights {
    fn default() -> Self {
        Self { w_adapt: 0.7, w_priority: 0.3, w_len: 0.5, w_comp: 0.5 }
    }
}

impl ScoringWeights {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.w_adapt >= 0.0
            && self.w_priority >= 0.0
            && self.w_adapt + self.w_priority > 0.0
            && (0.0..=1.0).contains(&self.w_len)
            && (0.0..=1.0).contains(&self.w_comp)
            && (self.w_len + self.w_comp - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(format!("invalid scoring weights {self:?}"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub scale_id: ScaleId,
    pub score: f64,
    pub adaptability: f64,
    pub priority: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendationMode {
    #[default]
    Single,
    JointMulti,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub scales: Vec<Candidate>,
    pub mode: RecommendationMode,
    pub rationale: Vec<String>,
    pub reranker: String,
    /// Raw reranker reply, kept so replays can reproduce external reranks.
    pub rerank_reply: Option<Vec<ScaleId>>,
    pub rerank_error: Option<String>,
}

impl Recommendation {
    pub fn contains(&self, scale: &ScaleId) -> bool {
        self.scales.iter().any(|c| &c.scale_id == scale)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecommendError {
    #[error("context vector has dimension {context}, scale {scale} has {profile}")]
    DimensionMismatch { scale: ScaleId, context: usize, profile: usize },
    #[error("empty scale catalog")]
    EmptyCatalog,
    #[error("no eligible scale after filtering")]
    NoEligibleScale,
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn adaptability_score(ctx: &[f64], profile: &ScaleProfile) -> Result<f64, RecommendError> {
    let other = &profile.characteristic_vector;
    if ctx.len() != other.len() {
        return Err(RecommendError::DimensionMismatch {
            scale: profile.scale_id.clone(),
            context: ctx.len(),
            profile: other.len(),
        });
    }
    let dot: f64 = ctx.iter().zip(other).map(|(a, b)| a * b).sum();
    let na = libm::sqrt(ctx.iter().map(|a| a * a).sum());
    let nb = libm::sqrt(other.iter().map(|b| b * b).sum());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Dimensions covered by scales already in the history, or `None` when the
/// history is empty.
pub fn assessed_dimensions(state: &ContextState, catalog: &[ScaleProfile]) -> Option<BTreeSet<AttributeId>> {
    if state.history.results.is_empty() {
        return None;
    }
    let mut dims = BTreeSet::new();
    for r in &state.history.results {
        if let Some(p) = catalog.iter().find(|p| p.scale_id == r.scale_id) {
            dims.extend(p.covered_dimensions.iter().cloned());
        }
    }
    Some(dims)
}

/// Burden/novelty priority in [0, 1].
pub fn priority_score(
    profile: &ScaleProfile,
    assessed: Option<&BTreeSet<AttributeId>>,
    catalog_max_items: u32,
    weights: &ScoringWeights,
) -> f64 {
    let length_term = if catalog_max_items == 0 {
        0.0
    } else {
        (1.0 - f64::from(profile.item_count) / f64::from(catalog_max_items)).clamp(0.0, 1.0)
    };
    let novelty = if profile.covered_dimensions.is_empty() {
        0.0
    } else {
        match assessed {
            None => 1.0,
            Some(done) => {
                let fresh = profile.covered_dimensions.iter().filter(|d| !done.contains(*d)).count();
                fresh as f64 / profile.covered_dimensions.len() as f64
            }
        }
    };
    weights.w_len * length_term + weights.w_comp * novelty
}

/// Descending by score, ties by scale id.
pub fn sort_candidates(candidates: &mut [Candidate]) {
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.scale_id.cmp(&b.scale_id)));
}

pub fn score_candidates(
    ctx: &[f64],
    catalog: &[ScaleProfile],
    weights: &ScoringWeights,
    state: &ContextState,
) -> Result<Vec<Candidate>, RecommendError> {
    if catalog.is_empty() {
        return Err(RecommendError::EmptyCatalog);
    }
    let max_items = catalog.iter().map(|p| p.item_count).max().unwrap_or(0);
    let assessed = assessed_dimensions(state, catalog);
    let mut out = catalog
        .iter()
        .map(|profile| {
            let adaptability = adaptability_score(ctx, profile)?;
            let priority = priority_score(profile, assessed.as_ref(), max_items, weights);
            Ok(Candidate {
                scale_id: profile.scale_id.clone(),
                score: weights.w_adapt * adaptability + weights.w_priority * priority,
                adaptability,
                priority,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    sort_candidates(&mut out);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub candidates: Vec<Candidate>,
    pub belief_argmax: Option<ConditionId>,
    pub turn: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("reranker failed: {0}")]
pub struct RerankError(pub String);

/// Reorders (and may truncate) already-filtered candidates. Ids it returns
/// that were not in the request are discarded by the caller.
pub trait Reranker {
    fn name(&self) -> &str;
    fn rerank(&self, request: &RerankRequest) -> Result<Vec<ScaleId>, RerankError>;
}

pub struct IdentityReranker;

impl Reranker for IdentityReranker {
    fn name(&self) -> &str {
        "identity"
    }

    fn rerank(&self, request: &RerankRequest) -> Result<Vec<ScaleId>, RerankError> {
        Ok(request.candidates.iter().map(|c| c.scale_id.clone()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionConfig {
    pub mode: RecommendationMode,
    pub max_joint: usize,
}

/// Applies contraindication and cooldown filters, the reranker, then picks
/// the final scale set.
pub fn finalize_recommendation(
    ranked: &[Candidate],
    belief: &BeliefState,
    state: &ContextState,
    catalog: &[ScaleProfile],
    reranker: &dyn Reranker,
    config: &SelectionConfig,
) -> Result<Recommendation, RecommendError> {
    let suspected = belief.argmax().cloned();
    let mut rationale = Vec::new();
    rationale.push(format!("scored {} candidate scales", ranked.len()));

    let mut survivors: Vec<Candidate> = Vec::new();
    for candidate in ranked {
        let Some(profile) = catalog.iter().find(|p| p.scale_id == candidate.scale_id) else {
            rationale.push(format!("dropped {}: not in catalog", candidate.scale_id));
            continue;
        };
        if let Some(c) = suspected.as_ref().filter(|c| profile.contraindications.contains(*c)) {
            rationale.push(format!("dropped {}: contraindicated for {c}", candidate.scale_id));
            continue;
        }
        let recent = state.history.results.iter().filter(|r| r.scale_id == candidate.scale_id).any(|r| {
            state.turn.saturating_sub(r.turn) < profile.cooldown_turns
        });
        if recent {
            rationale.push(format!("dropped {}: administered within {} turns", candidate.scale_id, profile.cooldown_turns));
            continue;
        }
        survivors.push(candidate.clone());
    }
    if survivors.is_empty() {
        return Err(RecommendError::NoEligibleScale);
    }

    let request = RerankRequest { candidates: survivors.clone(), belief_argmax: suspected, turn: state.turn };
    let (ordered, rerank_reply, rerank_error) = match reranker.rerank(&request) {
        Ok(reply) => {
            let mut seen = BTreeSet::new();
            let mut ordered = Vec::new();
            for id in &reply {
                match survivors.iter().find(|c| &c.scale_id == id) {
                    Some(c) if seen.insert(id.clone()) => ordered.push(c.clone()),
                    Some(_) => rationale.push(format!("reranker repeated {id}; ignored")),
                    None => rationale.push(format!("reranker returned ineligible {id}; ignored")),
                }
            }
            if ordered.is_empty() {
                rationale.push(format!("reranker {} returned no eligible scale; kept score order", reranker.name()));
                (survivors.clone(), Some(reply), None)
            } else {
                (ordered, Some(reply), None)
            }
        }
        Err(e) => {
            rationale.push(format!("reranker {} failed ({}); kept score order", reranker.name(), e.0));
            (survivors.clone(), None, Some(e.0))
        }
    };

    let mut chosen = match config.mode {
        RecommendationMode::Single => alloc::vec![ordered[0].clone()],
        RecommendationMode::JointMulti => greedy_cover(&ordered, catalog, config.max_joint.max(1)),
    };
    sort_candidates(&mut chosen);
    for c in &chosen {
        rationale.push(format!(
            "selected {} (score {:.4}, adaptability {:.4}, priority {:.4})",
            c.scale_id, c.score, c.adaptability, c.priority
        ));
    }
    Ok(Recommendation {
        scales: chosen,
        mode: config.mode,
        rationale,
        reranker: reranker.name().into(),
        rerank_reply,
        rerank_error,
    })
}

/// Greedy max-coverage over `covered_dimensions`: each step takes the
/// largest marginal gain, then the higher score, then the earlier rank.
fn greedy_cover(ordered: &[Candidate], catalog: &[ScaleProfile], k: usize) -> Vec<Candidate> {
    let dims = |c: &Candidate| {
        catalog.iter().find(|p| p.scale_id == c.scale_id).map(|p| &p.covered_dimensions)
    };
    let mut covered: BTreeSet<AttributeId> = BTreeSet::new();
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < k.min(ordered.len()) {
        let mut best: Option<(usize, usize)> = None;
        for (i, c) in ordered.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let gain = dims(c).map_or(0, |d| d.iter().filter(|x| !covered.contains(*x)).count());
            let better = match best {
                None => true,
                Some((bi, bg)) => gain > bg || (gain == bg && c.score > ordered[bi].score),
            };
            if better {
                best = Some((i, gain));
            }
        }
        match best {
            Some((i, gain)) if gain > 0 || chosen.is_empty() => {
                if let Some(d) = dims(&ordered[i]) {
                    covered.extend(d.iter().cloned());
                }
                chosen.push(i);
            }
            _ => break,
        }
    }
    chosen.into_iter().map(|i| ordered[i].clone()).collect()
}
