//! Long Dependency Score.
//!
//! For segments `c_1..c_N` and every pair `j < i`:
//!
//! ```text
//! DST(i,j)  = (PPL(c_i) - PPL(c_i | c_j)) / PPL(c_i)
//! DDI(i,j)  = (i - j) / (N - 1)
//! DSP(i)    = (E_max - E) / E_max,   E = entropy(softmax_j(ΔPPL(i,j))), E_max = ln(i - 1)
//! LDS(i,j)  = (α·DST + β·DDI) · DSP(i)
//! LDS       = Σ_i Σ_{j<i} LDS(i,j) · [DST(i,j) > τ]
//! ```
//!
//! Sampled mode replaces the double sum by a sum over `T` distinct sampled
//! pairs and estimates each `DSP(i)` from the sampled part of its row.

mod sampling;
mod score;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::sha256_hex;

pub use sampling::{pair_count, sample_pairs, SampledPairSet};
pub use score::{lds_exact, lds_sampled, score_grid, DocumentScore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdsError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("perplexities must be positive and finite (got {0}, {1})")]
    BadPerplexity(f64, f64),
    #[error("{0} mode requested but configuration says {1:?}")]
    ModeMismatch(&'static str, ScoreMode),
    #[error(transparent)]
    Scoring(#[from] crate::scorer::ScoringError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Exact,
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DspVariant {
    /// `(α·DST + β·DDI) · DSP`
    Multiplicative,
    /// `α·DST + β·DDI + γ·DSP`
    Additive,
    /// `α·DST + β·DDI`
    None,
}

impl std::str::FromStr for DspVariant {
    type Err = LdsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multiplicative" => Ok(Self::Multiplicative),
            "additive" => Ok(Self::Additive),
            "none" => Ok(Self::None),
            _ => Err(LdsError::Config(format!("unknown dsp variant {s:?}"))),
        }
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = LdsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Self::Exact),
            "sampled" => Ok(Self::Sampled),
            _ => Err(LdsError::Config(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdsConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub mode: ScoreMode,
    /// Number of sampled pairs `T`.
    pub samples: usize,
    pub seed: u64,
    pub dsp_variant: DspVariant,
}

impl Default for LdsConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            tau: 0.05,
            mode: ScoreMode::Sampled,
            samples: 5000,
            seed: 0,
            dsp_variant: DspVariant::Multiplicative,
        }
    }
}

impl LdsConfig {
    pub fn exact() -> Self {
        Self {
            mode: ScoreMode::Exact,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LdsError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LdsError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.tau.is_finite() {
            return Err(LdsError::Config(format!("tau must be finite, got {}", self.tau)));
        }
        if self.samples == 0 {
            return Err(LdsError::Config("samples (T) must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"), 16)
    }
}

/// Dependency strength: relative perplexity drop of `c_i` given `c_j`.
pub fn dst(ppl_i: f64, ppl_i_given_j: f64) -> Result<f64, LdsError> {
    let ok = |v: f64| v.is_finite() && v > 0.0;
    if !ok(ppl_i) || !ok(ppl_i_given_j) {
        return Err(LdsError::BadPerplexity(ppl_i, ppl_i_given_j));
    }
    Ok((ppl_i - ppl_i_given_j) / ppl_i)
}

/// Dependency distance for 1-based indices `j < i <= n`.
pub fn ddi(i: usize, j: usize, n: usize) -> f64 {
    assert!(n >= 2 && 1 <= j && j < i && i <= n, "ddi requires 1 <= j < i <= n, got i={i} j={j} n={n}");
    (i - j) as f64 / (n - 1) as f64
}

/// Dependency specificity of one row of perplexity reductions.
///
/// One minus the entropy of the softmax of `delta_ppls`, normalized by the
/// entropy of the uniform distribution over the row. A single-entry row has
/// no alternative to prefer over and scores 0.
pub fn dsp(delta_ppls: &[f64]) -> f64 {
    assert!(!delta_ppls.is_empty(), "dsp of an empty row");
    let m = delta_ppls.len();
    if m == 1 {
        return 0.0;
    }
    let max = delta_ppls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for &x in delta_ppls {
        let z = x - max;
        let e = z.exp();
        sum += e;
        weighted += e * z;
    }
    // E = -Σ p log p with log p = z - ln(sum).
    let entropy = sum.ln() - weighted / sum;
    let e_max = (m as f64).ln();
    ((e_max - entropy) / e_max).clamp(0.0, 1.0)
}

/// Pair score before the indicator gate.
pub fn lds_pair(dst: f64, ddi: f64, dsp_i: f64, cfg: &LdsConfig) -> f64 {
    let base = cfg.alpha * dst + cfg.beta * ddi;
    match cfg.dsp_variant {
        DspVariant::Multiplicative => base * dsp_i,
        DspVariant::Additive => base + cfg.gamma * dsp_i,
        DspVariant::None => base,
    }
}

/// Everything computed for one segment pair. Indices are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    /// Target segment.
    pub i: usize,
    /// Context segment, `j < i`.
    pub j: usize,
    pub delta_ppl: f64,
    pub dst: f64,
    pub ddi: f64,
    pub dsp: f64,
    pub indicator: bool,
    /// `LDS(i,j)` before the indicator gate.
    pub lds_pair: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub doc_id: String,
    pub source: String,
    pub lds: f64,
    pub mode: ScoreMode,
    pub n_segments: usize,
    pub pairs_evaluated: usize,
    /// `DSP(i)` for every target with at least one evaluated pair.
    pub dsp_per_target: BTreeMap<usize, f64>,
    pub config_hash: String,
    pub config: LdsConfig,
}
