//! Assets bundled with the crate: a four-condition knowledge base, an
//! English lexicon, a five-scale catalog and scripted sessions. They back the
//! tests and the `simulate` command and double as authoring examples.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use crate::belief::KnowledgeBase;
use crate::config::EngineConfig;
use crate::engine::Engine;
use crate::extraction::{tokenize, Lexicon, LexiconDocument};
use crate::recommend::ScaleProfile;
use crate::scale::ScaleDefinition;
use crate::script::Script;

pub const KB_JSON: &str = include_str!("../fixtures/kb.json");
pub const LEXICON_JSON: &str = include_str!("../fixtures/lexicon.json");

pub const CATALOG_JSON: &[(&str, &str)] = &[
    ("gad7_style", include_str!("../fixtures/catalog/gad7_style.json")),
    ("isi_sleep_style", include_str!("../fixtures/catalog/isi_sleep_style.json")),
    ("k6_distress_style", include_str!("../fixtures/catalog/k6_distress_style.json")),
    ("pcl_trauma_style", include_str!("../fixtures/catalog/pcl_trauma_style.json")),
    ("phq9_style", include_str!("../fixtures/catalog/phq9_style.json")),
];

pub const SCRIPT_JSON: &[(&str, &str)] = &[
    ("gradual_disclosure", include_str!("../fixtures/scripts/gradual_disclosure.json")),
    ("full_assessment", include_str!("../fixtures/scripts/full_assessment.json")),
    ("crisis_mid_assessment", include_str!("../fixtures/scripts/crisis_mid_assessment.json")),
    ("quiet_then_close", include_str!("../fixtures/scripts/quiet_then_close.json")),
];

pub fn knowledge_base() -> KnowledgeBase {
    serde_json::from_str(KB_JSON).expect("bundled knowledge base parses")
}

pub fn lexicon_document() -> LexiconDocument {
    serde_json::from_str(LEXICON_JSON).expect("bundled lexicon parses")
}

pub fn lexicon() -> Lexicon {
    Lexicon::new(lexicon_document()).expect("bundled lexicon is valid")
}

/// Every token used by the lexicon plus some filler words.
pub fn lexicon_words() -> Vec<String> {
    let doc = lexicon_document();
    let mut words: BTreeSet<String> = ["i", "and", "the", "feel", "very", "today", "really", "but"].iter().map(|w| String::from(*w)).collect();
    let phrases = doc
        .entries
        .iter()
        .map(|e| e.phrase.as_str())
        .chain(doc.valence_terms.iter().map(|t| t.phrase.as_str()))
        .chain(doc.risk_keywords.iter().map(|k| k.phrase.as_str()))
        .chain(doc.negation_markers.iter().map(String::as_str));
    for p in phrases {
        words.extend(tokenize(p));
    }
    words.into_iter().collect()
}

/// The catalog sorted by scale id.
pub fn catalog() -> Vec<ScaleDefinition> {
    CATALOG_JSON.iter().map(|(_, text)| serde_json::from_str(text).expect("bundled scale parses")).collect()
}

pub fn scale(id: &str) -> Option<ScaleDefinition> {
    catalog().into_iter().find(|d| d.scale_id.as_str() == id)
}

pub fn profiles() -> Vec<ScaleProfile> {
    catalog().into_iter().map(|d| d.profile).collect()
}

pub fn engine() -> Engine {
    engine_with(EngineConfig::default())
}

pub fn engine_with(config: EngineConfig) -> Engine {
    Engine::new(knowledge_base(), lexicon(), catalog(), config).expect("bundled assets are consistent")
}

pub fn scripts() -> Vec<Script> {
    SCRIPT_JSON.iter().map(|(_, text)| serde_json::from_str(text).expect("bundled script parses")).collect()
}

pub fn script(name: &str) -> Option<Script> {
    scripts().into_iter().find(|s| s.name == name)
}
