//! Risk index and override verdicts.
//!
//! `R = sigmoid(alpha*E + beta*K + gamma*L + delta*S)` with no bias term, so
//! a session with no signals sits at exactly 0.5, well below the default
//! override threshold of 0.85.

use alloc::string::String;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::context::ContextState;
use crate::extraction::Lexicon;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskSignals {
    pub emotional_volatility: f64,
    pub keyword_score: f64,
    pub linguistic_anomaly: f64,
    pub historical_severity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub r_high: f64,
    /// Turns looked back for volatility and keyword hits.
    pub window: usize,
    pub hysteresis_turns: u64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 3.0, gamma: 1.5, delta: 1.5, r_high: 0.85, window: 5, hysteresis_turns: 3 }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.r_high > 0.0 && self.r_high < 1.0) {
            return Err(format!("r_high {} outside (0, 1)", self.r_high));
        }
        if self.window < 2 {
            return Err(format!("risk window {} < 2", self.window));
        }
        if [self.alpha, self.beta, self.gamma, self.delta].iter().any(|w| !w.is_finite()) {
            return Err("risk weights must be finite".into());
        }
        Ok(())
    }
}

/// Lower bound (exclusive) of the Elevated band.
pub const ELEVATED_THRESHOLD: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskLevel {
    Normal,
    Elevated,
    Override,
}

impl core::fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Self::Normal => "normal",
            Self::Elevated => "elevated",
            Self::Override => "override",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskVerdict {
    pub r: f64,
    pub level: RiskLevel,
    pub evaluated_version: u64,
    pub evaluated_turn: u64,
    pub signals: RiskSignals,
    /// Turn of the most recent raw override, while hysteresis holds it.
    pub override_since: Option<u64>,
}

impl RiskVerdict {
    pub fn baseline() -> Self {
        Self {
            r: 0.5,
            level: RiskLevel::Normal,
            evaluated_version: 0,
            evaluated_turn: 0,
            signals: RiskSignals::default(),
            override_since: None,
        }
    }

    /// True when the index itself is above threshold, ignoring hysteresis.
    pub fn raw_override(&self, config: &RiskConfig) -> bool {
        self.r > config.r_high
    }
}

fn tail<T>(xs: &[T], n: usize) -> &[T] {
    &xs[xs.len().saturating_sub(n)..]
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

pub fn derive_signals(state: &ContextState, lexicon: &Lexicon, config: &RiskConfig) -> RiskSignals {
    let valence = tail(&state.valence_history, config.window);
    let emotional_volatility = if valence.len() < 2 { 0.0 } else { (2.0 * mean_std(valence).1).min(1.0) };

    let first_turn = state.turn.saturating_sub(config.window as u64 - 1).max(1);
    let keyword_sum: f64 = state
        .risk_keyword_hits
        .iter()
        .filter(|h| h.turn >= first_turn)
        .map(|h| lexicon.keyword_severity(&h.keyword_id))
        .sum();
    let keyword_score = keyword_sum.clamp(0.0, 1.0);

    let words: Vec<f64> = state.behavior.words_per_turn.iter().map(|&w| w as f64).collect();
    let linguistic_anomaly = if words.len() < 3 {
        0.0
    } else {
        let (mean, sd) = mean_std(&words);
        if sd == 0.0 {
            0.0
        } else {
            let z = (words[words.len() - 1] - mean) / sd;
            (libm::fabs(z) / 3.0).min(1.0)
        }
    };

    let historical_severity = state.history.latest_severity().unwrap_or(0.0).clamp(0.0, 1.0);
    RiskSignals { emotional_volatility, keyword_score, linguistic_anomaly, historical_severity }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn risk_index(signals: &RiskSignals, config: &RiskConfig) -> f64 {
    sigmoid(
        config.alpha * signals.emotional_volatility
            + config.beta * signals.keyword_score
            + config.gamma * signals.linguistic_anomaly
            + config.delta * signals.historical_severity,
    )
}

/// Raw level of an index value: strictly above `r_high` overrides.
pub fn level_for(r: f64, config: &RiskConfig) -> RiskLevel {
    if r > config.r_high {
        RiskLevel::Override
    } else if r > ELEVATED_THRESHOLD {
        RiskLevel::Elevated
    } else {
        RiskLevel::Normal
    }
}

/// Scores the snapshot; an override stays in force for `hysteresis_turns`
/// turns after the last raw override recorded in `previous`.
pub fn evaluate(state: &ContextState, lexicon: &Lexicon, config: &RiskConfig, previous: Option<&RiskVerdict>) -> RiskVerdict {
    let signals = derive_signals(state, lexicon, config);
    let r = risk_index(&signals, config);
    let raw = level_for(r, config);
    let (level, override_since) = if raw == RiskLevel::Override {
        (RiskLevel::Override, Some(state.turn))
    } else {
        match previous.and_then(|p| p.override_since) {
            Some(since) if state.turn < since + config.hysteresis_turns => (RiskLevel::Override, Some(since)),
            _ => (raw, None),
        }
    };
    RiskVerdict { r, level, evaluated_version: state.version, evaluated_turn: state.turn, signals, override_since }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::KeywordHit;
    use crate::fixtures;
    use alloc::vec;

    fn signals(e: f64, k: f64, l: f64, s: f64) -> RiskSignals {
        RiskSignals { emotional_volatility: e, keyword_score: k, linguistic_anomaly: l, historical_severity: s }
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(risk_index(&RiskSignals::default(), &RiskConfig::default()), 0.5);
    }

    #[test]
    fn weighted_example() {
        let r = risk_index(&signals(0.8, 0.9, 0.5, 0.6), &RiskConfig::default());
        let expected = 1.0 / (1.0 + libm::exp(-5.95));
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.9974).abs() < 1e-4);
        assert!(r > 0.85);
    }

    #[test]
    fn threshold_is_strict() {
        let logit = libm::log(17.0 / 3.0);
        assert!((logit - 1.7346).abs() < 1e-4);
        let cfg = RiskConfig { alpha: logit, ..Default::default() };
        let r = risk_index(&signals(1.0, 0.0, 0.0, 0.0), &cfg);
        assert!((r - 0.85).abs() < 1e-12);
        // Land exactly on the threshold and confirm it is not an override.
        let exact = RiskConfig { r_high: r, ..cfg };
        assert_ne!(level_for(r, &exact), RiskLevel::Override);
        assert_eq!(level_for(0.9, &RiskConfig::default()), RiskLevel::Override);
        assert_eq!(level_for(0.5, &RiskConfig::default()), RiskLevel::Normal);
        assert_eq!(level_for(0.8, &RiskConfig::default()), RiskLevel::Elevated);
    }

    #[test]
    fn fresh_session_has_no_signals() {
        let mut s = ContextState::new("s", 0);
        s.turn = 1;
        s.version = 1;
        s.valence_history.push(0.0);
        s.behavior.words_per_turn.push(6);
        assert_eq!(derive_signals(&s, &fixtures::lexicon(), &RiskConfig::default()), RiskSignals::default());
    }

    #[test]
    fn keyword_score_clamps() {
        let lex = fixtures::lexicon();
        let mut s = ContextState::new("s", 0);
        s.turn = 2;
        s.risk_keyword_hits = vec![
            KeywordHit { turn: 1, keyword_id: "hopeless_future".into() },
            KeywordHit { turn: 2, keyword_id: "burden".into() },
        ];
        assert_eq!(lex.keyword_severity("hopeless_future"), 0.6);
        assert_eq!(lex.keyword_severity("burden"), 0.5);
        assert_eq!(derive_signals(&s, &lex, &RiskConfig::default()).keyword_score, 1.0);
        // Outside the window the hits no longer count.
        s.turn = 12;
        assert_eq!(derive_signals(&s, &lex, &RiskConfig::default()).keyword_score, 0.0);
    }

    #[test]
    fn volatility_clamps() {
        let mut s = ContextState::new("s", 0);
        s.valence_history = vec![-0.9, 0.9, -0.9, 0.9];
        let xs = &s.valence_history;
        let mean = xs.iter().sum::<f64>() / 4.0;
        let sd = libm::sqrt(xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0);
        assert!((sd - 0.9).abs() < 1e-12);
        assert_eq!(derive_signals(&s, &fixtures::lexicon(), &RiskConfig::default()).emotional_volatility, 1.0);
    }

    #[test]
    fn linguistic_anomaly_from_word_counts() {
        let mut s = ContextState::new("s", 0);
        s.behavior.words_per_turn = vec![10, 10];
        assert_eq!(derive_signals(&s, &fixtures::lexicon(), &RiskConfig::default()).linguistic_anomaly, 0.0);
        s.behavior.words_per_turn = vec![10, 10, 10];
        assert_eq!(derive_signals(&s, &fixtures::lexicon(), &RiskConfig::default()).linguistic_anomaly, 0.0);
        s.behavior.words_per_turn = vec![10, 10, 10, 10, 60];
        // mean 20, population sd 20, z = 2
        let l = derive_signals(&s, &fixtures::lexicon(), &RiskConfig::default()).linguistic_anomaly;
        assert!((l - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn hysteresis_holds_override() {
        let lex = fixtures::lexicon();
        let cfg = RiskConfig { hysteresis_turns: 2, ..Default::default() };
        let mut s = ContextState::new("s", 0);
        s.turn = 5;
        s.risk_keyword_hits.push(KeywordHit { turn: 5, keyword_id: "self_harm_intent".into() });
        let v5 = evaluate(&s, &lex, &cfg, None);
        assert_eq!(v5.level, RiskLevel::Override);
        assert_eq!(v5.override_since, Some(5));

        let mut calm = ContextState::new("s", 0);
        calm.turn = 6;
        let v6 = evaluate(&calm, &lex, &cfg, Some(&v5));
        assert!(v6.r < 0.85);
        assert_eq!(v6.level, RiskLevel::Override);
        calm.turn = 7;
        let v7 = evaluate(&calm, &lex, &cfg, Some(&v6));
        assert_eq!(v7.level, RiskLevel::Normal);
        assert_eq!(v7.override_since, None);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(1000))]

        #[test]
        fn monotone_in_each_signal(
            w in proptest::array::uniform4(0.0f64..5.0),
            base in proptest::array::uniform4(0.0f64..=1.0),
            which in 0usize..4,
            bump in 0.0f64..=1.0,
        ) {
            let cfg = RiskConfig { alpha: w[0], beta: w[1], gamma: w[2], delta: w[3], ..Default::default() };
            let mut hi = base;
            hi[which] = (hi[which] + bump).min(1.0);
            let lo_r = risk_index(&signals(base[0], base[1], base[2], base[3]), &cfg);
            let hi_r = risk_index(&signals(hi[0], hi[1], hi[2], hi[3]), &cfg);
            proptest::prop_assert!(hi_r >= lo_r);
            proptest::prop_assert!(lo_r > 0.0 && lo_r < 1.0);
        }

        #[test]
        fn signals_stay_in_unit_range(
            valence in proptest::collection::vec(-1.0f64..=1.0, 0..12),
            words in proptest::collection::vec(0u64..500, 0..12),
            hits in proptest::collection::vec((1u64..12, 0usize..4), 0..10),
            severity in proptest::option::of(0.0f64..=1.0),
        ) {
            let lex = fixtures::lexicon();
            let ids = ["self_harm_intent", "hopeless_future", "burden", "unknown"];
            let mut s = ContextState::new("s", 0);
            s.turn = 12;
            s.valence_history = valence;
            s.behavior.words_per_turn = words;
            s.risk_keyword_hits = hits.into_iter().map(|(t, i)| KeywordHit { turn: t, keyword_id: ids[i].into() }).collect();
            if let Some(sev) = severity {
                s.history.results.push(crate::context::ScaleResultRef {
                    scale_id: "x".into(), completed_at: 1, total_score: 0, normalized_severity: sev, band_label: "b".into(), turn: 1,
                });
            }
            let sig = derive_signals(&s, &lex, &RiskConfig::default());
            for v in [sig.emotional_volatility, sig.keyword_score, sig.linguistic_anomaly, sig.historical_severity] {
                proptest::prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
