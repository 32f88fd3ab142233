use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use serde::{Deserialize, Serialize};

use crate::belief::PhaseThresholds;
use crate::context::ContextParams;
use crate::recommend::{RecommendationMode, ScoringWeights, SelectionConfig};
use crate::risk::RiskConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Timeouts {
    pub extractor_ms: u64,
    pub reranker_ms: u64,
    pub rewriter_ms: u64,
    pub webhook_ms: u64,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self { extractor_ms: 2000, reranker_ms: 2000, rewriter_ms: 2000, webhook_ms: 2000 }
    }
}

/// Every tunable of the engine. Missing fields in a config file fall back
/// to these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub thresholds: PhaseThresholds,
    pub weights: ScoringWeights,
    pub risk: RiskConfig,
    pub ewma_lambda: f64,
    pub valence_window: usize,
    pub engagement_ref_words: f64,
    pub max_joint: usize,
    pub recommendation_mode: RecommendationMode,
    pub timeouts: Timeouts,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            thresholds: PhaseThresholds::default(),
            weights: ScoringWeights::default(),
            risk: RiskConfig::default(),
            ewma_lambda: 0.6,
            valence_window: 3,
            engagement_ref_words: 20.0,
            max_joint: 3,
            recommendation_mode: RecommendationMode::Single,
            timeouts: Timeouts::default(),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut found = Vec::new();
        if let Err(e) = self.thresholds.validate() {
            found.push(e);
        }
        if let Err(e) = self.weights.validate() {
            found.push(e);
        }
        if let Err(e) = self.risk.validate() {
            found.push(e);
        }
        if !(self.ewma_lambda > 0.0 && self.ewma_lambda <= 1.0) {
            found.push(format!("ewma_lambda {} outside (0, 1]", self.ewma_lambda));
        }
        if self.valence_window == 0 {
            found.push("valence_window must be >= 1".into());
        }
        if !(self.engagement_ref_words > 0.0) {
            found.push("engagement_ref_words must be > 0".into());
        }
        if self.max_joint == 0 {
            found.push("max_joint must be >= 1".into());
        }
        if found.is_empty() {
            Ok(())
        } else {
            Err(found)
        }
    }

    pub fn context_params(&self) -> ContextParams {
        ContextParams { ewma_lambda: self.ewma_lambda, engagement_ref_words: self.engagement_ref_words }
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig { mode: self.recommendation_mode, max_joint: self.max_joint }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = EngineConfig::default();
        c.validate().unwrap();
        assert_eq!((c.thresholds.tau_min, c.thresholds.tau_max, c.risk.r_high), (0.2, 0.8, 0.85));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c: EngineConfig = serde_json::from_str(r#"{"weights": {"w_adapt": 0.5, "w_priority": 0.5, "w_len": 0.5, "w_comp": 0.5}}"#).unwrap();
        assert_eq!(c.weights.w_adapt, 0.5);
        assert_eq!(c.risk, RiskConfig::default());
    }

    #[test]
    fn invalid_values_reported() {
        let c = EngineConfig { ewma_lambda: 0.0, max_joint: 0, ..Default::default() };
        assert_eq!(c.validate().unwrap_err().len(), 2);
    }
}
