//! Schema-driven scale definitions, administration and scoring.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::recommend::ScaleProfile;
use crate::ScaleId;

pub const SCALE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemOption {
    pub label: String,
    pub value: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub prompt: String,
    pub options: Vec<ItemOption>,
    #[serde(default)]
    pub reverse_scored: bool,
}

impl Item {
    fn min_value(&self) -> i64 {
        self.options.iter().map(|o| o.value).min().unwrap_or(0)
    }

    fn max_value(&self) -> i64 {
        self.options.iter().map(|o| o.value).max().unwrap_or(0)
    }

    /// Reverse mapping `v -> max + min - v`; identity for plain items.
    pub fn scored_value(&self, v: i64) -> i64 {
        if self.reverse_scored {
            self.max_value() + self.min_value() - v
        } else {
            v
        }
    }

    pub fn has_option(&self, v: i64) -> bool {
        self.options.iter().any(|o| o.value == v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMethod {
    Sum,
    /// Mean of item values, rounded half away from zero.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub min_total: i64,
    pub max_total: i64,
    pub label: String,
    pub normalized_severity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scoring {
    pub method: ScoringMethod,
    #[serde(default)]
    pub subscales: BTreeMap<String, BTreeSet<String>>,
    pub bands: Vec<Band>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleDefinition {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub scale_id: ScaleId,
    pub title: String,
    pub items: Vec<Item>,
    pub scoring: Scoring,
    pub profile: ScaleProfile,
}

fn default_schema_version() -> u32 {
    SCALE_SCHEMA_VERSION
}

fn aggregate(method: ScoringMethod, values: &[i64]) -> i64 {
    let sum: i64 = values.iter().sum();
    match method {
        ScoringMethod::Sum => sum,
        ScoringMethod::Mean if values.is_empty() => 0,
        ScoringMethod::Mean => libm::round(sum as f64 / values.len() as f64) as i64,
    }
}

impl ScaleDefinition {
    /// Smallest and largest achievable totals.
    pub fn total_range(&self) -> (i64, i64) {
        let mins: Vec<i64> = self.items.iter().map(Item::min_value).collect();
        let maxs: Vec<i64> = self.items.iter().map(Item::max_value).collect();
        (aggregate(self.scoring.method, &mins), aggregate(self.scoring.method, &maxs))
    }

    pub fn item(&self, item_id: &str) -> Option<&Item> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn band_for(&self, total: i64) -> Option<&Band> {
        self.scoring.bands.iter().find(|b| b.min_total <= total && total <= b.max_total)
    }
}

/// Checks every structural invariant. `dimension`, when given, is the
/// expected characteristic-vector length.
pub fn validate_scale_definition(def: &ScaleDefinition, dimension: Option<usize>) -> Result<(), Vec<String>> {
    let mut found = Vec::new();
    let id = &def.scale_id;
    if def.schema_version != SCALE_SCHEMA_VERSION {
        found.push(format!("{id}: unsupported schema_version {}", def.schema_version));
    }
    if def.items.is_empty() {
        found.push(format!("{id}: no items"));
    }
    let mut item_ids = BTreeSet::new();
    for item in &def.items {
        if !item_ids.insert(item.item_id.as_str()) {
            found.push(format!("{id}: duplicate item id {}", item.item_id));
        }
        if item.options.is_empty() {
            found.push(format!("{id}: item {} has no options", item.item_id));
        }
        let values: BTreeSet<i64> = item.options.iter().map(|o| o.value).collect();
        if values.len() != item.options.len() {
            found.push(format!("{id}: item {} has duplicate option values", item.item_id));
        }
    }
    for (sub, members) in &def.scoring.subscales {
        for m in members {
            if !item_ids.contains(m.as_str()) {
                found.push(format!("{id}: subscale {sub} references missing item {m}"));
            }
        }
    }

    let (lo, hi) = def.total_range();
    let bands = &def.scoring.bands;
    if bands.is_empty() {
        found.push(format!("{id}: no bands"));
    }
    for b in bands {
        if b.min_total > b.max_total {
            found.push(format!("{id}: band {} has min_total > max_total", b.label));
        }
        if !(0.0..=1.0).contains(&b.normalized_severity) {
            found.push(format!("{id}: band {} severity outside [0, 1]", b.label));
        }
    }
    if let (Some(first), Some(last)) = (bands.first(), bands.last()) {
        if first.min_total > lo {
            found.push(format!("{id}: band gap at {lo}"));
        } else if first.min_total < lo {
            found.push(format!("{id}: bands start at {} below minimum total {lo}", first.min_total));
        }
        for pair in bands.windows(2) {
            let next_expected = pair[0].max_total + 1;
            if pair[1].min_total > next_expected {
                found.push(format!("{id}: band gap at {next_expected}"));
            } else if pair[1].min_total < next_expected {
                found.push(format!("{id}: band overlap at {}", pair[1].min_total));
            }
        }
        if last.max_total < hi {
            found.push(format!("{id}: band gap at {}", last.max_total + 1));
        } else if last.max_total > hi {
            found.push(format!("{id}: bands end at {} above maximum total {hi}", last.max_total));
        }
    }

    let p = &def.profile;
    if p.scale_id != def.scale_id {
        found.push(format!("{id}: profile scale_id {} does not match", p.scale_id));
    }
    if p.item_count as usize != def.items.len() || p.item_count == 0 {
        found.push(format!("{id}: profile item_count {} but {} items", p.item_count, def.items.len()));
    }
    if let Some(d) = dimension {
        if p.characteristic_vector.len() != d {
            found.push(format!("{id}: characteristic vector has dimension {}, expected {d}", p.characteristic_vector.len()));
        }
    }
    if p.characteristic_vector.iter().any(|x| !x.is_finite()) {
        found.push(format!("{id}: characteristic vector has non-finite entries"));
    }

    if found.is_empty() {
        Ok(())
    } else {
        Err(found)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessmentSession {
    pub scale_id: ScaleId,
    pub responses: BTreeMap<String, i64>,
    pub cursor: usize,
    pub started_at: u64,
    pub completed_at: Option<u64>,
}

impl AssessmentSession {
    pub fn start(def: &ScaleDefinition, started_at: u64) -> Self {
        Self { scale_id: def.scale_id.clone(), responses: BTreeMap::new(), cursor: 0, started_at, completed_at: None }
    }

    pub fn is_complete(&self) -> bool {
        self.completed_at.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScaleError {
    #[error("assessment for {session} cannot use definition {definition}")]
    WrongScale { session: ScaleId, definition: ScaleId },
    #[error("assessment already complete")]
    AlreadyComplete,
    #[error("item {got} answered out of order; expected {expected}")]
    OutOfOrder { expected: String, got: String },
    #[error("value {value} is not an option of item {item}")]
    InvalidValue { item: String, value: i64 },
    #[error("responses incomplete: {missing} item(s) unanswered")]
    Incomplete { missing: usize },
    #[error("total {0} falls in no band")]
    NoBand(i64),
}

pub fn next_item<'d>(session: &AssessmentSession, def: &'d ScaleDefinition) -> Option<&'d Item> {
    if session.scale_id != def.scale_id {
        return None;
    }
    def.items.get(session.cursor)
}

pub fn submit_response(
    session: &AssessmentSession,
    item_id: &str,
    value: i64,
    def: &ScaleDefinition,
    now: u64,
) -> Result<AssessmentSession, ScaleError> {
    if session.scale_id != def.scale_id {
        return Err(ScaleError::WrongScale { session: session.scale_id.clone(), definition: def.scale_id.clone() });
    }
    let Some(expected) = def.items.get(session.cursor) else {
        return Err(ScaleError::AlreadyComplete);
    };
    if expected.item_id != item_id {
        return Err(ScaleError::OutOfOrder { expected: expected.item_id.clone(), got: item_id.into() });
    }
    if !expected.has_option(value) {
        return Err(ScaleError::InvalidValue { item: item_id.into(), value });
    }
    let mut next = session.clone();
    next.responses.insert(item_id.into(), value);
    next.cursor += 1;
    if next.cursor == def.items.len() {
        next.completed_at = Some(now);
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleResult {
    pub scale_id: ScaleId,
    pub total_score: i64,
    pub subscale_scores: BTreeMap<String, i64>,
    pub band_label: String,
    pub normalized_severity: f64,
    pub completed_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretation: Option<String>,
}

pub fn score_scale(def: &ScaleDefinition, responses: &BTreeMap<String, i64>, completed_at: u64) -> Result<ScaleResult, ScaleError> {
    let mut scored: BTreeMap<&str, i64> = BTreeMap::new();
    let mut missing = 0;
    for item in &def.items {
        match responses.get(&item.item_id) {
            Some(&v) if item.has_option(v) => {
                scored.insert(item.item_id.as_str(), item.scored_value(v));
            }
            Some(&v) => return Err(ScaleError::InvalidValue { item: item.item_id.clone(), value: v }),
            None => missing += 1,
        }
    }
    if missing > 0 {
        return Err(ScaleError::Incomplete { missing });
    }
    let values: Vec<i64> = def.items.iter().map(|i| scored[i.item_id.as_str()]).collect();
    let total_score = aggregate(def.scoring.method, &values);
    let subscale_scores = def
        .scoring
        .subscales
        .iter()
        .map(|(name, members)| {
            let vals: Vec<i64> = members.iter().filter_map(|m| scored.get(m.as_str()).copied()).collect();
            (name.clone(), aggregate(def.scoring.method, &vals))
        })
        .collect();
    let band = def.band_for(total_score).ok_or(ScaleError::NoBand(total_score))?;
    Ok(ScaleResult {
        scale_id: def.scale_id.clone(),
        total_score,
        subscale_scores,
        band_label: band.label.clone(),
        normalized_severity: band.normalized_severity,
        completed_at,
        interpretation: band.interpretation.clone(),
    })
}
