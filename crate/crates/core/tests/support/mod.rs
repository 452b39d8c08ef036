//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod props;

use std::collections::HashMap;
use std::sync::{Arc, OnceLock};

use lds_core::corpus::{Segment, SegmentGrid};
use lds_core::evalbench::{background_model, Language};
use lds_core::scorer::{BackendError, Capabilities, LogLikelihood, NGramModel, PerplexityBackend, SegmentRef};
use lds_core::TokenId;

/// Segment `k` (1-based) of a scripted grid starts with token `k * SCRIPT_STRIDE`.
pub const SCRIPT_STRIDE: TokenId = 1_000;

/// Grid whose segments identify themselves through their first token.
pub fn scripted_grid(doc_id: &str, n: usize, segment_len: usize) -> SegmentGrid {
    let segments = (1..=n as TokenId)
        .map(|k| Segment::new((0..segment_len as TokenId).map(|t| k * SCRIPT_STRIDE + t).collect(), ""))
        .collect();
    SegmentGrid::from_segments(doc_id, "scripted", segments).unwrap()
}

/// Returns fixed perplexities: `uncond[i - 1]` for `PPL(c_i)` and
/// `cond[&(i, j)]` for `PPL(c_i | c_j)`, on grids from [`scripted_grid`].
#[derive(Clone, Debug, Default)]
pub struct ScriptedBackend {
    pub uncond: Vec<f64>,
    pub cond: HashMap<(usize, usize), f64>,
}

impl ScriptedBackend {
    pub fn new(uncond: Vec<f64>) -> Self {
        Self {
            uncond,
            cond: HashMap::new(),
        }
    }

    pub fn with(mut self, i: usize, j: usize, ppl: f64) -> Self {
        self.cond.insert((i, j), ppl);
        self
    }
}

fn seg_index(s: SegmentRef<'_>) -> usize {
    (s.tokens[0] / SCRIPT_STRIDE) as usize
}

impl PerplexityBackend for ScriptedBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_context_tokens: usize::MAX,
            deterministic: true,
        }
    }

    fn describe(&self) -> String {
        "scripted".into()
    }

    fn log_likelihood(
        &self,
        target: SegmentRef<'_>,
        context: Option<SegmentRef<'_>>,
    ) -> Result<LogLikelihood, BackendError> {
        let i = seg_index(target);
        let ppl = match context {
            None => self.uncond[i - 1],
            Some(c) => {
                let j = seg_index(c);
                *self
                    .cond
                    .get(&(i, j))
                    .ok_or_else(|| BackendError::Remote(format!("no script for ({i}, {j})")))?
            }
        };
        Ok(LogLikelihood {
            logprob_sum: -ppl.ln(),
            token_count: 1,
        })
    }
}

/// Perplexity is a pure function of the token content of target and context,
/// so identical segments get identical values.
pub struct ContentBackend;

impl PerplexityBackend for ContentBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_context_tokens: usize::MAX,
            deterministic: true,
        }
    }

    fn describe(&self) -> String {
        "content".into()
    }

    fn log_likelihood(
        &self,
        target: SegmentRef<'_>,
        context: Option<SegmentRef<'_>>,
    ) -> Result<LogLikelihood, BackendError> {
        let mix = |acc: u64, t: &TokenId| acc.wrapping_mul(0x100_0000_01b3).wrapping_add(*t ^ 0x9e37);
        let a = target.tokens.iter().fold(0xcbf2_9ce4_8422_2325, mix);
        let b = context.map_or(0, |c| c.tokens.iter().fold(7, mix));
        let base = 20.0 + (a % 1000) as f64 / 100.0;
        let drop = if context.is_some() { ((a ^ b) % 800) as f64 / 100.0 } else { 0.0 };
        Ok(LogLikelihood {
            logprob_sum: -(base - drop).ln(),
            token_count: 1,
        })
    }
}

/// N-gram model trained on the standard synthetic language, built once per process.
pub fn reference_model() -> Arc<NGramModel> {
    static MODEL: OnceLock<Arc<NGramModel>> = OnceLock::new();
    MODEL
        .get_or_init(|| Arc::new(background_model(&Language::standard(), 300, 1)))
        .clone()
}
