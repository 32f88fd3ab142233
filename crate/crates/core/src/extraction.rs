//! Utterance to structured signals.
//!
//! The [`Extractor`] trait is the seam where a language model would sit.
//! [`LexiconExtractor`] is the deterministic implementation used by default
//! and in every test: a case-folded, token-level phrase scan over a
//! [`Lexicon`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::AttributeId;

/// Tokens before a phrase that a negation marker may occupy.
pub const NEGATION_WINDOW: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: String,
    pub turn: u64,
    pub received_at: u64,
    pub latency_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub attribute_observations: BTreeMap<AttributeId, f64>,
    pub valence: f64,
    pub risk_keyword_hits: Vec<String>,
    #[serde(default)]
    pub word_count: u64,
}

impl ExtractionResult {
    /// Checks declared ranges; used to reject malformed external replies.
    pub fn check_ranges(&self) -> Result<(), String> {
        for (a, v) in &self.attribute_observations {
            if !(v.is_finite() && (-1.0..=1.0).contains(v)) {
                return Err(format!("observation {a} = {v} outside [-1, 1]"));
            }
        }
        if !(self.valence.is_finite() && (-1.0..=1.0).contains(&self.valence)) {
            return Err(format!("valence {} outside [-1, 1]", self.valence));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionSource {
    Lexicon,
    External,
    /// External endpoint failed; lexicon result used instead.
    LexiconFallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionOutcome {
    pub result: ExtractionResult,
    pub source: ExtractionSource,
    pub warnings: Vec<String>,
}

pub trait Extractor {
    fn extract(&self, utterance: &Utterance) -> ExtractionOutcome;
}

// Lexicon document (file format)

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub phrase: String,
    pub attribute: AttributeId,
    /// +1 or -1.
    pub polarity: i8,
    /// In (0, 1].
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValenceTerm {
    pub phrase: String,
    pub valence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskKeyword {
    pub phrase: String,
    pub keyword_id: String,
    /// In (0, 1].
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconDocument {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub entries: Vec<LexiconEntry>,
    #[serde(default)]
    pub valence_terms: Vec<ValenceTerm>,
    #[serde(default)]
    pub risk_keywords: Vec<RiskKeyword>,
    #[serde(default)]
    pub negation_markers: Vec<String>,
}

fn default_schema_version() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexiconViolation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for LexiconViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

/// Reports empty phrases, out-of-range weights and duplicate phrases.
/// Duplicates are judged after tokenization, within one dictionary.
pub fn validate_lexicon(doc: &LexiconDocument) -> Result<(), Vec<LexiconViolation>> {
    let mut found = Vec::new();
    let mut push = |location: String, message: &str| {
        found.push(LexiconViolation { location, message: message.to_string() });
    };

    fn check_phrases<'a>(section: &str, phrases: impl Iterator<Item = &'a str>, push: &mut impl FnMut(String, &str)) {
        let mut seen = BTreeSet::new();
        for (i, phrase) in phrases.enumerate() {
            let loc = format!("{section}[{i}] {phrase:?}");
            let tokens = tokenize(phrase);
            if tokens.is_empty() {
                push(loc, "empty phrase");
            } else if !seen.insert(tokens) {
                push(loc, "duplicate phrase");
            }
        }
    }

    check_phrases("entries", doc.entries.iter().map(|e| e.phrase.as_str()), &mut push);
    check_phrases("valence_terms", doc.valence_terms.iter().map(|e| e.phrase.as_str()), &mut push);
    check_phrases("risk_keywords", doc.risk_keywords.iter().map(|e| e.phrase.as_str()), &mut push);
    check_phrases("negation_markers", doc.negation_markers.iter().map(String::as_str), &mut push);

    for (i, e) in doc.entries.iter().enumerate() {
        let loc = format!("entries[{i}] {:?}", e.phrase);
        if !(e.weight > 0.0 && e.weight <= 1.0) {
            push(loc.clone(), "weight out of range");
        }
        if e.polarity != 1 && e.polarity != -1 {
            push(loc.clone(), "polarity must be +1 or -1");
        }
        if e.attribute.as_str().is_empty() {
            push(loc, "empty attribute id");
        }
    }
    for (i, t) in doc.valence_terms.iter().enumerate() {
        if !(-1.0..=1.0).contains(&t.valence) {
            push(format!("valence_terms[{i}] {:?}", t.phrase), "valence out of range");
        }
    }
    for (i, k) in doc.risk_keywords.iter().enumerate() {
        let loc = format!("risk_keywords[{i}] {:?}", k.phrase);
        if !(k.severity > 0.0 && k.severity <= 1.0) {
            push(loc.clone(), "severity out of range");
        }
        if k.keyword_id.is_empty() {
            push(loc, "empty keyword id");
        }
    }

    if found.is_empty() {
        Ok(())
    } else {
        Err(found)
    }
}

/// Case-folds and splits into word tokens (alphanumerics and apostrophes).
pub fn tokenize(text: &str) -> Vec<String> {
    let folded = text.to_lowercase();
    folded
        .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '\u{2019}'))
        .map(|t| t.replace('\u{2019}', "'"))
        .map(|t| t.trim_matches('\'').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Clone, Debug)]
struct Pattern<T> {
    tokens: Vec<String>,
    phrase: String,
    payload: T,
}

/// Longest first, then lexicographic, so the first hit at a position wins.
fn compile<T: Clone>(items: impl Iterator<Item = (String, T)>) -> Vec<Pattern<T>> {
    let mut out: Vec<Pattern<T>> = items
        .map(|(phrase, payload)| Pattern { tokens: tokenize(&phrase), phrase, payload })
        .filter(|p| !p.tokens.is_empty())
        .collect();
    out.sort_by(|a, b| b.tokens.len().cmp(&a.tokens.len()).then_with(|| a.phrase.cmp(&b.phrase)));
    out
}

fn matches_at<T>(tokens: &[String], at: usize, pattern: &Pattern<T>) -> bool {
    tokens.len() >= at + pattern.tokens.len() && tokens[at..at + pattern.tokens.len()] == pattern.tokens[..]
}

/// Greedy left-to-right longest-match scan; returns (start, len, pattern).
fn scan_longest<'p, T>(tokens: &[String], patterns: &'p [Pattern<T>]) -> Vec<(usize, usize, &'p Pattern<T>)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if let Some(p) = patterns.iter().find(|p| matches_at(tokens, i, p)) {
            out.push((i, p.tokens.len(), p));
            i += p.tokens.len();
        } else {
            i += 1;
        }
    }
    out
}

/// A validated lexicon with compiled token patterns.
#[derive(Clone, Debug)]
pub struct Lexicon {
    document: LexiconDocument,
    entries: Vec<Pattern<(AttributeId, f64)>>,
    valence: Vec<Pattern<f64>>,
    risk: Vec<Pattern<String>>,
    negations: Vec<Pattern<()>>,
    severities: BTreeMap<String, f64>,
}

impl Lexicon {
    pub fn new(document: LexiconDocument) -> Result<Self, Vec<LexiconViolation>> {
        validate_lexicon(&document)?;
        let entries = compile(
            document
                .entries
                .iter()
                .map(|e| (e.phrase.clone(), (e.attribute.clone(), f64::from(e.polarity) * e.weight))),
        );
        let valence = compile(document.valence_terms.iter().map(|t| (t.phrase.clone(), t.valence)));
        let risk = compile(document.risk_keywords.iter().map(|k| (k.phrase.clone(), k.keyword_id.clone())));
        let negations = compile(document.negation_markers.iter().map(|m| (m.clone(), ())));
        let mut severities: BTreeMap<String, f64> = BTreeMap::new();
        for k in &document.risk_keywords {
            let s = severities.entry(k.keyword_id.clone()).or_insert(0.0);
            *s = s.max(k.severity);
        }
        Ok(Self { document, entries, valence, risk, negations, severities })
    }

    pub fn document(&self) -> &LexiconDocument {
        &self.document
    }

    /// Severity of a keyword id (max over its phrases); 0 if unknown.
    pub fn keyword_severity(&self, keyword_id: &str) -> f64 {
        self.severities.get(keyword_id).copied().unwrap_or(0.0)
    }

    pub fn attributes(&self) -> BTreeSet<&AttributeId> {
        self.document.entries.iter().map(|e| &e.attribute).collect()
    }

    fn negated(&self, tokens: &[String], start: usize) -> bool {
        let lo = start.saturating_sub(NEGATION_WINDOW);
        (0..start).any(|s| {
            self.negations.iter().any(|m| {
                let end = s + m.tokens.len();
                end <= start && end > lo && matches_at(tokens, s, m)
            })
        })
    }
}

/// Deterministic phrase scan of one utterance.
pub fn extract_signals(utterance: &Utterance, lexicon: &Lexicon) -> ExtractionResult {
    let tokens = tokenize(&utterance.text);
    let mut result = ExtractionResult { word_count: tokens.len() as u64, ..Default::default() };
    if tokens.is_empty() {
        return result;
    }

    let mut sums: BTreeMap<AttributeId, (f64, u32)> = BTreeMap::new();
    for (start, _, p) in scan_longest(&tokens, &lexicon.entries) {
        let (attribute, signed_weight) = &p.payload;
        let value = if lexicon.negated(&tokens, start) { -signed_weight } else { *signed_weight };
        let slot = sums.entry(attribute.clone()).or_insert((0.0, 0));
        slot.0 += value;
        slot.1 += 1;
    }
    result.attribute_observations =
        sums.into_iter().map(|(a, (sum, n))| (a, (sum / f64::from(n)).clamp(-1.0, 1.0))).collect();

    let valences: Vec<f64> = scan_longest(&tokens, &lexicon.valence)
        .into_iter()
        .map(|(start, _, p)| if lexicon.negated(&tokens, start) { -p.payload } else { p.payload })
        .collect();
    if !valences.is_empty() {
        result.valence = (valences.iter().sum::<f64>() / valences.len() as f64).clamp(-1.0, 1.0);
    }

    // Every occurrence counts, overlapping or not.
    for start in 0..tokens.len() {
        for p in &lexicon.risk {
            if matches_at(&tokens, start, p) {
                result.risk_keyword_hits.push(p.payload.clone());
            }
        }
    }
    result
}

pub struct LexiconExtractor<'a> {
    lexicon: &'a Lexicon,
}

impl<'a> LexiconExtractor<'a> {
    pub fn new(lexicon: &'a Lexicon) -> Self {
        Self { lexicon }
    }
}

impl Extractor for LexiconExtractor<'_> {
    fn extract(&self, utterance: &Utterance) -> ExtractionOutcome {
        ExtractionOutcome {
            result: extract_signals(utterance, self.lexicon),
            source: ExtractionSource::Lexicon,
            warnings: Vec::new(),
        }
    }
}
