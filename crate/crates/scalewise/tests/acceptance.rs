//! Acceptance run: one PASS/FAIL line per criterion, each timed against its
//! own budget. Every oracle below is written from the definitions, not from
//! the library code, and the library is only called as the system under test.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use scalewise::remote::{Endpoints, Remote};
use scalewise::service::{router, AppState, ServiceOptions};
use scalewise_core::audit::verify;
use scalewise_core::belief::{
    belief_from_evidence, decide_phase, expected_info_gain, rank_refinement_attributes, select_refinement_attribute,
    ABSENT_THRESHOLD, MIN_INFO_GAIN, PRESENT_THRESHOLD,
};
use scalewise_core::context::{AttributeEvidence, KeywordHit, ScaleResultRef};
use scalewise_core::recommend::{adaptability_score, score_candidates, Candidate};
use scalewise_core::replay::replay;
use scalewise_core::risk::{evaluate, level_for, risk_index, sigmoid};
use scalewise_core::scale::score_scale;
use scalewise_core::script::{run_script, Step};
use scalewise_core::{
    fixtures, AttributeId, AuditEvent, BeliefState, ConditionId, ContextState, Engine, EngineConfig, EventKind,
    KnowledgeBase, Phase, PhaseThresholds, RiskConfig, RiskLevel, RiskSignals, RiskVerdict, ScaleDefinition,
    ScaleId, ScaleProfile, ScoringWeights, SessionPhase, SessionRunner,
};
use serde_json::{json, Value};
use tower::ServiceExt;

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

fn ensure(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

fn engine() -> Arc<Engine> {
    Arc::new(fixtures::engine())
}

// ---------------------------------------------------------------- oracles

/// Posterior by direct enumeration: prior times the likelihood of every
/// decisive observation, normalised once at the end.
fn oracle_belief(state: &ContextState, kb: &KnowledgeBase) -> BTreeMap<ConditionId, f64> {
    let mut w: BTreeMap<ConditionId, f64> = kb.conditions.iter().map(|c| (c.clone(), kb.prior[c])).collect();
    for (attr, ev) in &state.attributes {
        let present = if ev.value >= 0.25 {
            true
        } else if ev.value <= -0.25 {
            false
        } else {
            continue;
        };
        for (c, p) in w.iter_mut() {
            let l = kb.likelihood[c][attr];
            *p *= if present { l } else { 1.0 - l };
        }
    }
    let z: f64 = w.values().sum();
    w.values_mut().for_each(|p| *p /= z);
    w
}

fn oracle_argmax(b: &BTreeMap<ConditionId, f64>) -> ConditionId {
    let best = b.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    b.iter().find(|(_, &p)| p == best).map(|(c, _)| c.clone()).unwrap()
}

fn oracle_confidence(state: &ContextState, b: &BTreeMap<ConditionId, f64>, kb: &KnowledgeBase) -> f64 {
    let req = &kb.required_attributes[&oracle_argmax(b)];
    if req.is_empty() {
        return 1.0;
    }
    req.iter().filter(|a| state.attributes.contains_key(*a)).count() as f64 / req.len() as f64
}

/// Mutual information between the condition and the yes/no answer, summed
/// over the full joint table.
fn oracle_gain(b: &BTreeMap<ConditionId, f64>, attr: &AttributeId, kb: &KnowledgeBase) -> f64 {
    let joint: Vec<(f64, [f64; 2])> = b
        .iter()
        .map(|(c, &p)| {
            let l = kb.likelihood[c][attr];
            (p, [p * l, p * (1.0 - l)])
        })
        .collect();
    let marginal = [joint.iter().map(|(_, j)| j[0]).sum::<f64>(), joint.iter().map(|(_, j)| j[1]).sum::<f64>()];
    let mut mi = 0.0;
    for (pc, row) in &joint {
        for o in 0..2 {
            if row[o] > 0.0 {
                mi += row[o] * (row[o] / (pc * marginal[o])).log2();
            }
        }
    }
    mi
}

fn oracle_gains(b: &BTreeMap<ConditionId, f64>, state: &ContextState, kb: &KnowledgeBase) -> BTreeMap<AttributeId, f64> {
    kb.attribute_vocabulary
        .iter()
        .filter(|a| !state.attributes.contains_key(*a))
        .map(|a| (a.clone(), oracle_gain(b, a, kb)))
        .collect()
}

/// Accepts `pick` when it is an oracle maximiser (up to float noise) and
/// the informativeness cut-off agrees.
fn check_pick(pick: Option<&AttributeId>, gains: &BTreeMap<AttributeId, f64>) -> Result<(), String> {
    let max = gains.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    match pick {
        None => ensure(gains.is_empty() || max < MIN_INFO_GAIN + 1e-12, || format!("nothing picked but max gain {max}")),
        Some(a) => {
            let g = *gains.get(a).ok_or_else(|| format!("{a} is observed or unknown"))?;
            ensure(g >= max - 1e-12, || format!("{a} has gain {g}, oracle max {max}"))?;
            ensure(g >= MIN_INFO_GAIN - 1e-12, || format!("{a} picked with gain {g}"))?;
            let earlier_best = gains.range(..a.clone()).any(|(_, &x)| x > g + 1e-12);
            ensure(!earlier_best, || format!("a smaller id beats {a}"))
        }
    }
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Full recomputation of every candidate score, sorted best first.
fn oracle_scores(ctx: &[f64], catalog: &[ScaleProfile], w: &ScoringWeights, done: &[ScaleId]) -> Vec<(ScaleId, f64)> {
    let max_items = catalog.iter().map(|p| p.item_count).max().unwrap();
    let assessed: Option<BTreeSet<&AttributeId>> = if done.is_empty() {
        None
    } else {
        Some(catalog.iter().filter(|p| done.contains(&p.scale_id)).flat_map(|p| p.covered_dimensions.iter()).collect())
    };
    let mut out: Vec<(ScaleId, f64)> = catalog
        .iter()
        .map(|p| {
            let brevity = 1.0 - p.item_count as f64 / max_items as f64;
            let n = p.covered_dimensions.len();
            let novelty = match (&assessed, n) {
                (_, 0) => 0.0,
                (None, _) => 1.0,
                (Some(seen), _) => p.covered_dimensions.iter().filter(|d| !seen.contains(d)).count() as f64 / n as f64,
            };
            let priority = w.w_len * brevity + w.w_comp * novelty;
            (p.scale_id.clone(), w.w_adapt * oracle_cosine(ctx, &p.characteristic_vector) + w.w_priority * priority)
        })
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out
}

fn oracle_total(def: &ScaleDefinition, answers: &BTreeMap<String, i64>) -> i64 {
    def.items
        .iter()
        .map(|item| {
            let v = answers[&item.item_id];
            if item.reverse_scored {
                let lo = item.options.iter().map(|o| o.value).min().unwrap();
                let hi = item.options.iter().map(|o| o.value).max().unwrap();
                hi + lo - v
            } else {
                v
            }
        })
        .sum()
}

// ---------------------------------------------------------------- generators

fn random_kb(rng: &mut StdRng) -> KnowledgeBase {
    let conditions: Vec<ConditionId> = (0..rng.gen_range(1..=5)).map(|i| ConditionId::new(format!("c{i}"))).collect();
    let attributes: Vec<AttributeId> = (0..rng.gen_range(1..=8)).map(|i| AttributeId::new(format!("a{i}"))).collect();
    let mut likelihood: BTreeMap<ConditionId, BTreeMap<AttributeId, f64>> = conditions
        .iter()
        .map(|c| (c.clone(), attributes.iter().map(|a| (a.clone(), rng.gen_range(0.01..0.99))).collect()))
        .collect();
    // Occasionally copy one column onto another to create exact ties.
    if attributes.len() > 1 && rng.gen_bool(0.3) {
        let (from, to) = (attributes[rng.gen_range(0..attributes.len())].clone(), attributes[0].clone());
        for row in likelihood.values_mut() {
            let v = row[&from];
            row.insert(to.clone(), v);
        }
    }
    let raw: Vec<f64> = conditions.iter().map(|_| rng.gen_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    let prior = conditions.iter().zip(&raw).map(|(c, w)| (c.clone(), w / z)).collect();
    let required_attributes = conditions
        .iter()
        .map(|c| {
            let mut req: BTreeSet<AttributeId> = attributes.iter().filter(|_| rng.gen_bool(0.5)).cloned().collect();
            if req.is_empty() {
                req.insert(attributes[0].clone());
            }
            (c.clone(), req)
        })
        .collect();
    KnowledgeBase {
        schema_version: 1,
        conditions,
        attribute_vocabulary: attributes,
        required_attributes,
        likelihood,
        prior,
        questions: BTreeMap::new(),
        prompts: Default::default(),
    }
}

fn random_state(rng: &mut StdRng, kb: &KnowledgeBase) -> ContextState {
    let mut state = ContextState::new("acceptance", 0);
    for a in &kb.attribute_vocabulary {
        if rng.gen_bool(0.4) {
            let value = rng.gen_range(-1.0..=1.0);
            state.attributes.insert(a.clone(), AttributeEvidence { value, last_observed_turn: 1, observation_count: 1 });
        }
    }
    state
}

fn random_belief(rng: &mut StdRng, kb: &KnowledgeBase, state: &ContextState) -> BeliefState {
    match rng.gen_range(0..4) {
        0 => BeliefState::from_prior(kb),
        1 => {
            // All mass on one condition: no question is informative.
            let hot = rng.gen_range(0..kb.conditions.len());
            let probabilities =
                kb.conditions.iter().enumerate().map(|(i, c)| (c.clone(), if i == hot { 1.0 } else { 0.0 })).collect();
            BeliefState { probabilities }
        }
        2 => belief_from_evidence(state, kb).unwrap(),
        _ => {
            let raw: Vec<f64> = kb.conditions.iter().map(|_| rng.gen_range(0.0..1.0) + 1e-6).collect();
            let z: f64 = raw.iter().sum();
            BeliefState { probabilities: kb.conditions.iter().zip(&raw).map(|(c, w)| (c.clone(), w / z)).collect() }
        }
    }
}

fn attr_universe(d: usize) -> Vec<AttributeId> {
    (0..d).map(|i| AttributeId::new(format!("d{i:02}"))).collect()
}

fn random_catalog(rng: &mut StdRng, d: usize) -> Vec<ScaleProfile> {
    let universe = attr_universe(d);
    let n = rng.gen_range(1..=10);
    let mut out: Vec<ScaleProfile> = (0..n)
        .map(|i| {
            let zero = rng.gen_bool(0.05);
            ScaleProfile {
                scale_id: ScaleId::new(format!("s{i}")),
                characteristic_vector: (0..d).map(|_| if zero { 0.0 } else { rng.gen_range(-1.0..=1.0) }).collect(),
                item_count: rng.gen_range(1..=40),
                covered_dimensions: universe.iter().filter(|_| rng.gen_bool(0.3)).cloned().collect(),
                contraindications: BTreeSet::new(),
                cooldown_turns: 0,
            }
        })
        .collect();
    if n > 1 && rng.gen_bool(0.3) {
        // An exact duplicate under another id must tie-break by id.
        let mut twin = out[0].clone();
        twin.scale_id = ScaleId::new("s_twin");
        out.push(twin);
    }
    out.shuffle(rng);
    out
}

fn random_weights(rng: &mut StdRng) -> ScoringWeights {
    let w_len = rng.gen_range(0.0..=1.0);
    ScoringWeights { w_adapt: rng.gen_range(0.05..=1.0), w_priority: rng.gen_range(0.0..=1.0), w_len, w_comp: 1.0 - w_len }
}

fn state_with_history(done: &[ScaleId]) -> ContextState {
    let mut state = ContextState::new("acceptance", 0);
    for (i, id) in done.iter().enumerate() {
        state.history.results.push(ScaleResultRef {
            scale_id: id.clone(),
            completed_at: i as u64,
            total_score: 0,
            normalized_severity: 0.0,
            band_label: "minimal".into(),
            turn: 1,
        });
    }
    state
}

fn ids(c: &[Candidate]) -> Vec<ScaleId> {
    c.iter().map(|c| c.scale_id.clone()).collect()
}

/// Splits a log into the runs of events produced by one input each.
fn by_input(events: &[AuditEvent]) -> Vec<&[AuditEvent]> {
    let starts: Vec<usize> =
        (1..events.len()).filter(|&i| events[i].payload.get("input").is_some()).collect();
    starts
        .iter()
        .enumerate()
        .map(|(k, &s)| &events[s..starts.get(k + 1).copied().unwrap_or(events.len())])
        .collect()
}

fn says(name: &str) -> Vec<(String, u64)> {
    fixtures::script(name)
        .unwrap()
        .steps
        .into_iter()
        .filter_map(|s| match s {
            Step::Say { text, latency_ms } => Some((text, latency_ms)),
            _ => None,
        })
        .collect()
}

const T0: u64 = 1_700_000_000_000;

// ---------------------------------------------------------------- criteria

fn threshold_fidelity() -> Outcome {
    let t = EngineConfig::default().thresholds;
    ensure(t == PhaseThresholds { tau_min: 0.2, tau_max: 0.8 }, || format!("default thresholds {t:?}"))?;
    let table = [
        (0.0, Phase::Explore),
        (0.1, Phase::Explore),
        (0.2, Phase::Explore),
        (0.21, Phase::Refine),
        (0.5, Phase::Refine),
        (0.79, Phase::Refine),
        (0.8, Phase::Recommend),
        (1.0, Phase::Recommend),
    ];
    for (conf, want) in table {
        let got = decide_phase(conf, &t);
        ensure(got == want, || format!("conf {conf}: {got:?}, expected {want:?}"))?;
    }
    Ok(format!("{} rows, tau_min 0.2 explores, tau_max 0.8 recommends", table.len()))
}

fn random_risk_state(rng: &mut StdRng, keywords: &[String]) -> ContextState {
    let mut s = ContextState::new("acceptance", 0);
    s.turn = rng.gen_range(1..=12);
    for _ in 0..rng.gen_range(0..=2) {
        let keyword_id = keywords.choose(rng).unwrap().clone();
        s.risk_keyword_hits.push(KeywordHit { turn: rng.gen_range(1..=s.turn), keyword_id });
    }
    s.valence_history = (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    s.behavior.words_per_turn = (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(1..=40)).collect();
    if rng.gen_bool(0.5) {
        s.history.results = state_with_history(&[ScaleId::new("phq9_style")]).history.results;
        s.history.results[0].normalized_severity = rng.gen_range(0.0..=1.0);
    }
    s
}

fn risk_constants() -> Outcome {
    let cfg = RiskConfig::default();
    ensure(cfg.r_high == 0.85, || format!("r_high {}", cfg.r_high))?;
    ensure(sigmoid(0.0) == 0.5, || format!("sigmoid(0) = {}", sigmoid(0.0)))?;
    ensure(risk_index(&RiskSignals::default(), &cfg) == 0.5, || "no signals is not 0.5".into())?;

    let at = 0.85_f64;
    let above = f64::from_bits(at.to_bits() + 1);
    let below = f64::from_bits(at.to_bits() - 1);
    ensure(level_for(at, &cfg) != RiskLevel::Override, || "0.85 itself overrides".into())?;
    ensure(level_for(below, &cfg) != RiskLevel::Override, || "below 0.85 overrides".into())?;
    ensure(level_for(above, &cfg) == RiskLevel::Override, || "just above 0.85 does not override".into())?;
    let mut v = RiskVerdict::baseline();
    v.r = at;
    ensure(!v.raw_override(&cfg), || "verdict at 0.85 overrides".into())?;
    v.r = above;
    ensure(v.raw_override(&cfg), || "verdict above 0.85 does not override".into())?;

    let mut rng = StdRng::seed_from_u64(2);
    let lexicon = fixtures::lexicon();
    let keywords: Vec<String> = fixtures::lexicon_document().risk_keywords.into_iter().map(|k| k.keyword_id).collect();
    let mut overrides = 0;
    for _ in 0..500 {
        let state = random_risk_state(&mut rng, &keywords);
        let verdict = evaluate(&state, &lexicon, &cfg, None);
        ensure((verdict.level == RiskLevel::Override) == (verdict.r > 0.85), || format!("level {:?} at r {}", verdict.level, verdict.r))?;
        ensure(verdict.r == risk_index(&verdict.signals, &cfg), || "verdict r is not the index of its signals".into())?;
        overrides += usize::from(verdict.level == RiskLevel::Override);
    }

    for _ in 0..1000 {
        let cfg = RiskConfig {
            alpha: rng.gen_range(0.0..5.0),
            beta: rng.gen_range(0.0..5.0),
            gamma: rng.gen_range(0.0..5.0),
            delta: rng.gen_range(0.0..5.0),
            ..RiskConfig::default()
        };
        let s = RiskSignals {
            emotional_volatility: rng.gen_range(0.0..=1.0),
            keyword_score: rng.gen_range(0.0..=1.0),
            linguistic_anomaly: rng.gen_range(0.0..=1.0),
            historical_severity: rng.gen_range(0.0..=1.0),
        };
        let r0 = risk_index(&s, &cfg);
        for i in 0..4 {
            let mut up = s;
            let bump = rng.gen_range(0.0..=1.0);
            match i {
                0 => up.emotional_volatility += bump,
                1 => up.keyword_score += bump,
                2 => up.linguistic_anomaly += bump,
                _ => up.historical_severity += bump,
            }
            let r1 = risk_index(&up, &cfg);
            ensure(r1 >= r0, || format!("signal {i} raised by {bump} lowered R from {r0} to {r1} under {cfg:?}"))?;
        }
    }
    Ok(format!("strict boundary at 0.85, sigmoid(0)=0.5, 500 evaluated states ({overrides} override), 1000 monotone configs"))
}

fn check_ig_case(belief: &BeliefState, state: &ContextState, kb: &KnowledgeBase) -> Result<(), String> {
    let b = &belief.probabilities;
    for a in &kb.attribute_vocabulary {
        let got = expected_info_gain(belief, a, kb).map_err(|e| e.to_string())?;
        let want = oracle_gain(b, a, kb);
        ensure(got >= -1e-12, || format!("negative gain {got} for {a}"))?;
        ensure((got - want).abs() <= 1e-9, || format!("gain for {a}: {got} vs oracle {want}"))?;
    }
    let ranked = rank_refinement_attributes(belief, state, kb).map_err(|e| e.to_string())?;
    let gains = oracle_gains(b, state, kb);
    let ranked_ids: Vec<&AttributeId> = ranked.iter().map(|(a, _)| a).collect();
    ensure(ranked_ids == gains.keys().collect::<Vec<_>>(), || "ranking does not cover exactly the unobserved attributes".into())?;
    let pick = select_refinement_attribute(belief, state, kb);
    check_pick(pick.as_ref(), &gains)?;
    // Exact ties in the library's own numbers resolve to the smallest id.
    if let Some(p) = &pick {
        let top = ranked.iter().map(|(_, g)| *g).fold(f64::NEG_INFINITY, f64::max);
        let first = ranked.iter().find(|(_, g)| *g == top).map(|(a, _)| a).unwrap();
        ensure(first == p, || format!("picked {p}, first maximiser is {first}"))?;
    }
    Ok(())
}

fn ig_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let kb = fixtures::knowledge_base();
    ensure(kb.conditions.len() == 4 && kb.attribute_vocabulary.len() == 10, || "fixture kb is not 4 x 10".into())?;
    let mut cases = 0;
    let empty = ContextState::new("acceptance", 0);
    check_ig_case(&BeliefState::from_prior(&kb), &empty, &kb)?;
    cases += 1;
    for _ in 0..100 {
        let state = random_state(&mut rng, &kb);
        let belief = random_belief(&mut rng, &kb, &state);
        check_ig_case(&belief, &state, &kb).map_err(|e| format!("fixture kb: {e}"))?;
        cases += 1;
    }
    let mut nones = 0;
    for k in 0..200 {
        let kb = random_kb(&mut rng);
        for _ in 0..3 {
            let state = random_state(&mut rng, &kb);
            let belief = random_belief(&mut rng, &kb, &state);
            check_ig_case(&belief, &state, &kb).map_err(|e| format!("random kb {k}: {e}"))?;
            nones += usize::from(select_refinement_attribute(&belief, &state, &kb).is_none());
            cases += 1;
        }
    }
    Ok(format!("{cases} belief/state cases over the fixture kb and 200 random kbs ({nones} with nothing worth asking)"))
}

fn scoring_oracle() -> Outcome {
    let mut rng = StdRng::seed_from_u64(4);
    let mut checked = 0;
    for k in 0..100 {
        let d = rng.gen_range(1..=16);
        let catalog = random_catalog(&mut rng, d);
        let ctx: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let weights = random_weights(&mut rng);
        let done: Vec<ScaleId> = catalog.iter().filter(|_| rng.gen_bool(0.25)).map(|p| p.scale_id.clone()).collect();
        let state = state_with_history(&done);

        let got = score_candidates(&ctx, &catalog, &weights, &state).map_err(|e| e.to_string())?;
        let want = oracle_scores(&ctx, &catalog, &weights, &done);
        ensure(got.len() == want.len(), || format!("catalog {k}: {} candidates for {} scales", got.len(), want.len()))?;
        let by_id: BTreeMap<&ScaleId, f64> = want.iter().map(|(id, s)| (id, *s)).collect();
        for (i, c) in got.iter().enumerate() {
            let expect = by_id[&c.scale_id];
            ensure((c.score - expect).abs() <= 1e-12, || format!("catalog {k}: {} scored {} vs {expect}", c.scale_id, c.score))?;
            if c.scale_id != want[i].0 {
                let gap = (by_id[&c.scale_id] - want[i].1).abs();
                ensure(gap <= 1e-12, || format!("catalog {k}: rank {i} is {} but oracle has {}", c.scale_id, want[i].0))?;
            }
        }

        for p in catalog.iter().filter(|p| p.characteristic_vector.iter().any(|x| *x != 0.0)) {
            let own = adaptability_score(&p.characteristic_vector, p).map_err(|e| e.to_string())?;
            ensure((own - 1.0).abs() <= 1e-9, || format!("self similarity of {} is {own}", p.scale_id))?;
        }

        let adapt_only = ScoringWeights { w_priority: 0.0, ..weights };
        let factor = 10f64.powf(rng.gen_range(-3.0..=3.0));
        let scaled: Vec<f64> = ctx.iter().map(|x| x * factor).collect();
        let a = score_candidates(&ctx, &catalog, &adapt_only, &state).map_err(|e| e.to_string())?;
        let b = score_candidates(&scaled, &catalog, &adapt_only, &state).map_err(|e| e.to_string())?;
        ensure(ids(&a) == ids(&b), || format!("catalog {k}: ranking changed when the context was scaled by {factor}"))?;
        checked += 1;
    }
    Ok(format!("{checked} random catalogs: ranking, self similarity and scale invariance"))
}

const CRISIS: &str = "and sometimes I want to kill myself";

fn assert_intervention_turn(resp: &scalewise_core::TurnResponse, group: &[AuditEvent], turn: u64) -> Result<(), String> {
    ensure(resp.phase == SessionPhase::Intervention, || format!("turn {turn}: phase {}", resp.phase))?;
    ensure(resp.risk_level == RiskLevel::Override, || format!("turn {turn}: risk {}", resp.risk_level))?;
    ensure(resp.recommendation.is_none(), || format!("turn {turn}: recommendation in response"))?;
    ensure(resp.scale_item.is_none(), || format!("turn {turn}: scale item in response"))?;
    let forbidden = [EventKind::Scores, EventKind::Recommendation, EventKind::RefinementSelected, EventKind::ScaleStarted, EventKind::ScaleResponse];
    for e in group {
        ensure(!forbidden.contains(&e.kind), || format!("turn {turn}: {} audited during override", e.kind))?;
    }
    ensure(group.iter().any(|e| e.kind == EventKind::Override), || format!("turn {turn}: no override event"))?;
    ensure(
        group.iter().any(|e| e.kind == EventKind::PhaseTransition && e.payload["to"] == "intervention"),
        || format!("turn {turn}: no transition to intervention"),
    )
}

fn override_dominance() -> Outcome {
    let engine = engine();
    let lines = says("gradual_disclosure");
    for k in 1..=6usize {
        let mut runner = SessionRunner::new(engine.clone(), format!("dominance-{k}"), T0, None).map_err(|e| e.to_string())?;
        for (i, (text, latency)) in lines.iter().take(k).enumerate() {
            let turn = i + 1;
            let at = T0 + turn as u64 * 1000;
            let before = runner.audit().len();
            let text = if turn == k { format!("{text} {CRISIS}") } else { text.clone() };
            let resp = runner.handle_turn(&text, *latency, at).map_err(|e| e.to_string())?;
            if turn == k {
                assert_intervention_turn(&resp, &runner.audit().events()[before..], turn as u64)?;
            }
        }
    }

    // Crisis in the middle of a questionnaire.
    let mut runner = SessionRunner::new(engine.clone(), "dominance-assessment", T0, None).map_err(|e| e.to_string())?;
    let mut rec = None;
    let mut at = T0;
    for (text, latency) in &lines {
        at += 1000;
        let resp = runner.handle_turn(text, *latency, at).map_err(|e| e.to_string())?;
        if let Some(r) = resp.recommendation {
            rec = Some(r);
            break;
        }
    }
    let top = rec.ok_or("gradual disclosure never recommended")?.scales[0].scale_id.clone();
    at += 1000;
    let mut status = runner.accept(&top, at).map_err(|e| e.to_string())?;
    for _ in 0..2 {
        let item = status.item.clone().ok_or("no item to answer")?;
        at += 1000;
        status = runner.respond(&item.item_id, item.options[0].value, at).map_err(|e| e.to_string())?;
    }
    let next_item = status.item.clone().ok_or("no third item")?;
    let before = runner.audit().len();
    at += 1000;
    let resp = runner.handle_turn(&format!("I feel sad {CRISIS}"), 2000, at).map_err(|e| e.to_string())?;
    assert_intervention_turn(&resp, &runner.audit().events()[before..], resp.turn)?;
    let suspended = runner.session.suspended_assessment.as_ref().ok_or("assessment discarded instead of suspended")?;
    ensure(suspended.scale_id == top && suspended.cursor == 2, || format!("suspended {} at {}", suspended.scale_id, suspended.cursor))?;
    ensure(runner.session.active_assessment.is_none(), || "assessment still active".into())?;
    ensure(runner.assessment_status().item.is_none(), || "an item is still offered".into())?;
    at += 1000;
    ensure(runner.respond(&next_item.item_id, next_item.options[0].value, at).is_err(), || "answer accepted during intervention".into())?;
    Ok(format!("six injected runs plus one mid-assessment ({top} suspended after 2 answers)"))
}

fn refinement_loop() -> Outcome {
    let engine = engine();
    let kb = engine.kb();
    ensure(PRESENT_THRESHOLD == 0.25 && ABSENT_THRESHOLD == -0.25, || "evidence cut-offs moved".into())?;
    let run = run_script(engine.clone(), &fixtures::script("gradual_disclosure").unwrap(), None).map_err(|e| e.to_string())?;
    let events = run.runner.audit().events();
    let mut phases: Vec<String> = Vec::new();
    let mut asked = Vec::new();
    let mut first_ready: Option<u64> = None;
    let mut first_rec: Option<u64> = None;
    for group in by_input(events) {
        let Some(commit) = group.iter().find(|e| e.kind == EventKind::ContextCommit) else { continue };
        let Some(confidence) = group.iter().find(|e| e.kind == EventKind::Confidence) else { continue };
        let turn = confidence.turn;
        let state: ContextState = serde_json::from_value(commit.payload["state"].clone()).map_err(|e| e.to_string())?;
        let belief = oracle_belief(&state, kb);
        for (c, p) in &belief {
            let audited = confidence.payload["belief"]["probabilities"][c.as_str()].as_f64().unwrap_or(f64::NAN);
            ensure((audited - p).abs() <= 1e-12, || format!("turn {turn}: belief[{c}] {audited} vs oracle {p}"))?;
        }
        let conf = oracle_confidence(&state, &belief, kb);
        let audited_conf = confidence.payload["conf"].as_f64().unwrap();
        ensure((audited_conf - conf).abs() <= 1e-12, || format!("turn {turn}: conf {audited_conf} vs oracle {conf}"))?;

        let selected = group.iter().find(|e| e.kind == EventKind::RefinementSelected);
        let recommended = group.iter().any(|e| e.kind == EventKind::Recommendation);
        if conf >= 0.8 {
            first_ready.get_or_insert(turn);
            if recommended {
                first_rec.get_or_insert(turn);
            }
        } else if conf > 0.2 {
            let sel = selected.ok_or_else(|| format!("turn {turn}: refine turn without a selection"))?;
            let pick: Option<AttributeId> = serde_json::from_value(sel.payload["attribute"].clone()).map_err(|e| e.to_string())?;
            check_pick(pick.as_ref(), &oracle_gains(&belief, &state, kb)).map_err(|e| format!("turn {turn}: {e}"))?;
            asked.push(pick.map(|a| a.to_string()).unwrap_or_else(|| "-".into()));
        } else {
            ensure(selected.is_none() && !recommended, || format!("turn {turn}: explore turn acted"))?;
        }
        for e in group.iter().filter(|e| e.kind == EventKind::PhaseTransition) {
            if let Some(to) = e.payload["to"].as_str() {
                if phases.last().map(String::as_str) != Some(to) {
                    phases.push(to.into());
                }
            }
        }
    }
    let want = ["exploration", "refinement", "recommendation"];
    let order: Vec<usize> = want.iter().filter_map(|p| phases.iter().position(|x| x == p)).collect();
    ensure(order.len() == 3 && order.windows(2).all(|w| w[0] < w[1]), || format!("phase path {phases:?}"))?;
    ensure(first_ready.is_some() && first_rec == first_ready, || format!("conf first reached 0.8 at {first_ready:?}, recommended at {first_rec:?}"))?;
    Ok(format!("path {}, asked [{}], recommended at turn {}", phases.join(" -> "), asked.join(", "), first_rec.unwrap()))
}

fn scale_scoring() -> Outcome {
    let phq = fixtures::scale("phq9_style").ok_or("no phq9_style fixture")?;
    ensure(phq.items.len() == 9, || format!("{} items", phq.items.len()))?;
    let uniform = |v: i64| -> BTreeMap<String, i64> { phq.items.iter().map(|i| (i.item_id.clone(), v)).collect() };
    let low = score_scale(&phq, &uniform(0), 0).map_err(|e| e.to_string())?;
    ensure(low.total_score == 0 && low.band_label == "minimal", || format!("all-min: {} {}", low.total_score, low.band_label))?;
    let high = score_scale(&phq, &uniform(3), 0).map_err(|e| e.to_string())?;
    ensure(high.total_score == 27 && high.band_label == "severe", || format!("all-max: {} {}", high.total_score, high.band_label))?;

    let catalog = fixtures::catalog();
    let k6 = catalog.iter().find(|d| d.items.iter().any(|i| i.reverse_scored)).ok_or("no reverse-scored fixture")?;
    let mut rng = StdRng::seed_from_u64(7);
    let mut reversed = 0;
    for n in 0..50 {
        // Every fifth set hits the scale with reversed items.
        let def = if n % 5 == 0 { k6 } else { catalog.choose(&mut rng).unwrap() };
        let answers: BTreeMap<String, i64> =
            def.items.iter().map(|i| (i.item_id.clone(), i.options.choose(&mut rng).unwrap().value)).collect();
        let got = score_scale(def, &answers, 0).map_err(|e| e.to_string())?;
        let want = oracle_total(def, &answers);
        ensure(got.total_score == want, || format!("{}: {} vs oracle {want} for {answers:?}", def.scale_id, got.total_score))?;
        let band = def.scoring.bands.iter().find(|b| b.min_total <= want && want <= b.max_total).unwrap();
        ensure(got.band_label == band.label, || format!("{}: band {} vs {}", def.scale_id, got.band_label, band.label))?;
        reversed += usize::from(def.items.iter().any(|i| i.reverse_scored));
    }
    Ok(format!("0 minimal, 27 severe, 50 random sets ({reversed} with reversed items)"))
}

/// Payload bytes of one canonical line: from after `"payload":` up to the
/// `,"prev_hash":` that follows it.
fn payload_span(line: &str) -> (usize, usize) {
    let start = line.find("\"payload\":").unwrap() + "\"payload\":".len();
    let end = line.rfind(",\"prev_hash\":").unwrap();
    (start, end)
}

/// True when a log whose line `i` was replaced by `bytes` fails to load or
/// to verify at exactly that event. Earlier lines are untouched and already
/// verified, so only the altered event needs rechecking.
fn flip_detected(bytes: &[u8], original: &AuditEvent) -> bool {
    let Ok(line) = std::str::from_utf8(bytes) else { return true };
    let Ok(event) = AuditEvent::from_line(line) else { return true };
    if event.to_line() != line {
        return true;
    }
    event.seq != original.seq || event.prev_hash != original.prev_hash || event.compute_hash().map_or(true, |h| h != event.hash)
}

fn replay_determinism() -> Outcome {
    let engine = engine();
    let mut flips = 0usize;
    let mut events_total = 0;
    let mut rng = StdRng::seed_from_u64(8);
    for script in fixtures::scripts() {
        let run = run_script(engine.clone(), &script, None).map_err(|e| e.to_string())?;
        let events = run.runner.audit().events().to_vec();
        verify(&events).map_err(|b| format!("{}: {b}", script.name))?;
        let report = replay(&events, engine.clone()).map_err(|e| format!("{}: {e}", script.name))?;
        ensure(report.is_clean(), || format!("{}: diverged {:?}", script.name, report.divergence))?;
        for e in &events {
            let line = e.to_line();
            ensure(AuditEvent::from_line(&line).as_ref() == Ok(e), || format!("{}: seq {} does not round-trip", script.name, e.seq))?;
            let (start, end) = payload_span(&line);
            let mut bytes = line.clone().into_bytes();
            for pos in start..end {
                bytes[pos] ^= 1;
                ensure(flip_detected(&bytes, e), || format!("{}: flip at seq {} byte {pos} undetected", script.name, e.seq))?;
                bytes[pos] ^= 1;
                flips += 1;
            }
        }
        // A rewritten payload is caught by full-log verification at its own seq.
        let i = rng.gen_range(1..events.len());
        let mut altered = events.clone();
        altered[i].payload = json!({ "tampered": true });
        let brk = verify(&altered).err().ok_or("tampered log verified")?;
        ensure(brk.seq == i as u64, || format!("break at {} instead of {i}", brk.seq))?;
        events_total += events.len();
    }
    Ok(format!("{} scripts, {events_total} events replayed clean, {flips} single-byte payload flips all detected", fixtures::scripts().len()))
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn offline(started: Instant) -> Outcome {
    let endpoints = Endpoints::default();
    ensure(
        endpoints.extractor.is_none() && endpoints.reranker.is_none() && endpoints.rewriter.is_none() && endpoints.webhook.is_none(),
        || "default endpoints are configured".into(),
    )?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let summary = runtime.block_on(async {
        let remote = Remote::new(Endpoints::default(), tokio::runtime::Handle::current());
        let app = router(AppState::new(engine(), remote, ServiceOptions { log_dir: None, ..ServiceOptions::default() }));
        let (status, created) = call(&app, "POST", "/sessions", None).await;
        ensure(status == StatusCode::CREATED, || format!("create: {status}"))?;
        let id = created["session_id"].as_str().unwrap().to_owned();
        let mut phase = Value::Null;
        for (text, _) in says("gradual_disclosure") {
            let (status, resp) = call(&app, "POST", &format!("/sessions/{id}/turns"), Some(json!({ "text": text }))).await;
            ensure(status == StatusCode::OK, || format!("turn: {status} {resp}"))?;
            phase = resp["phase"].clone();
        }
        let (status, _) = call(&app, "POST", &format!("/sessions/{id}/close"), None).await;
        ensure(status == StatusCode::OK, || format!("close: {status}"))?;
        Ok::<_, String>(format!("HTTP session reached {phase} with no endpoints"))
    })?;
    let total = started.elapsed();
    ensure(total < Duration::from_secs(60), || format!("acceptance took {total:?}"))?;
    Ok(format!("{summary}; whole acceptance run {:.1} s, no UI involved", total.as_secs_f64()))
}

// ---------------------------------------------------------------- runner

fn report(name: &str, budget: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = t.elapsed();
    let outcome = outcome.and_then(|d| {
        if elapsed < budget {
            Ok(d)
        } else {
            Err(format!("{d}; took {elapsed:?}, budget {budget:?}"))
        }
    });
    let ms = elapsed.as_secs_f64() * 1000.0;
    match &outcome {
        Ok(detail) => println!("PASS {name} ({ms:.0} ms / {} s): {detail}", budget.as_secs()),
        Err(why) => println!("FAIL {name} ({ms:.0} ms / {} s): {why}", budget.as_secs()),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    let started = Instant::now();
    let criteria: [Criterion; 8] = [
        ("threshold fidelity", 1, threshold_fidelity),
        ("risk constant fidelity", 5, risk_constants),
        ("information-gain oracle equivalence", 30, ig_oracle),
        ("scoring oracle equivalence", 10, scoring_oracle),
        ("override dominance end-to-end", 10, override_dominance),
        ("refinement loop end-to-end", 5, refinement_loop),
        ("scale scoring", 5, scale_scoring),
        ("audit replay determinism", 10, replay_determinism),
    ];
    let mut ok = true;
    for (name, secs, f) in criteria {
        ok &= report(name, Duration::from_secs(secs), f);
    }
    ok &= report("offline suite under 60 s", Duration::from_secs(60), || offline(started));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
