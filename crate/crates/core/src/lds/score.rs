use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sampling::{pair_count, sample_pairs};
use super::{ddi, dsp, dst, lds_pair, LdsConfig, LdsError, PairScore, ScoreMode, ScoreReport};
use crate::corpus::SegmentGrid;
use crate::scorer::{ppl_given, PerplexityBackend, PplCache, ScoringError};

/// A report plus the per-pair detail it was accumulated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentScore {
    pub report: ScoreReport,
    pub pairs: Vec<PairScore>,
}

/// Scores `grid` in whichever mode `cfg` selects.
pub fn score_grid(
    grid: &SegmentGrid,
    backend: &dyn PerplexityBackend,
    cache: &PplCache,
    cfg: &LdsConfig,
) -> Result<DocumentScore, LdsError> {
    match cfg.mode {
        ScoreMode::Exact => lds_exact(grid, backend, cache, cfg),
        ScoreMode::Sampled => lds_sampled(grid, backend, cache, cfg),
    }
}

/// LDS over all `N(N-1)/2` pairs.
pub fn lds_exact(
    grid: &SegmentGrid,
    backend: &dyn PerplexityBackend,
    cache: &PplCache,
    cfg: &LdsConfig,
) -> Result<DocumentScore, LdsError> {
    if cfg.mode != ScoreMode::Exact {
        return Err(LdsError::ModeMismatch("exact", cfg.mode));
    }
    let n = grid.n_segments();
    let pairs: Vec<(usize, usize)> = (2..=n).flat_map(|i| (1..i).map(move |j| (j, i))).collect();
    accumulate(grid, backend, cache, cfg, &pairs)
}

/// LDS over `min(T, N(N-1)/2)` sampled pairs.
pub fn lds_sampled(
    grid: &SegmentGrid,
    backend: &dyn PerplexityBackend,
    cache: &PplCache,
    cfg: &LdsConfig,
) -> Result<DocumentScore, LdsError> {
    if cfg.mode != ScoreMode::Sampled {
        return Err(LdsError::ModeMismatch("sampled", cfg.mode));
    }
    let sample = sample_pairs(grid.n_segments(), cfg.samples, cfg.seed);
    accumulate(grid, backend, cache, cfg, &sample.pairs)
}

/// `pairs` are `(j, i)` sorted by `(i, j)`. Exhaustive input reproduces
/// exact mode bit for bit because both run through here in the same order.
fn accumulate(
    grid: &SegmentGrid,
    backend: &dyn PerplexityBackend,
    cache: &PplCache,
    cfg: &LdsConfig,
    pairs: &[(usize, usize)],
) -> Result<DocumentScore, LdsError> {
    cfg.validate()?;
    let n = grid.n_segments();
    let segs = &grid.segments;
    let uncond = cache.unconditional(backend, grid)?;
    let cond: Vec<f64> = pairs
        .par_iter()
        .map(|&(j, i)| {
            ppl_given(backend, segs[i - 1].as_ref(), segs[j - 1].as_ref()).map_err(|e| match e {
                ScoringError::Call(source) => ScoringError::Backend { segment: i - 1, source },
                other => other,
            })
        })
        .collect::<Result<_, _>>()?;

    let mut scores = Vec::with_capacity(pairs.len());
    let mut dsp_per_target = BTreeMap::new();
    let mut lds = 0.0;
    let mut start = 0;
    while start < pairs.len() {
        let i = pairs[start].1;
        let end = start + pairs[start..].iter().take_while(|p| p.1 == i).count();
        let deltas: Vec<f64> = cond[start..end].iter().map(|c| uncond[i - 1] - c).collect();
        // A lone sampled entry from a longer row says nothing about specificity.
        let row_dsp = if deltas.len() == 1 && i > 2 { 1.0 } else { dsp(&deltas) };
        dsp_per_target.insert(i, row_dsp);
        for (k, &(j, _)) in pairs[start..end].iter().enumerate() {
            let strength = dst(uncond[i - 1], cond[start + k])?;
            let distance = ddi(i, j, n);
            let value = lds_pair(strength, distance, row_dsp, cfg);
            let indicator = strength > cfg.tau;
            if indicator {
                lds += value;
            }
            scores.push(PairScore {
                i,
                j,
                delta_ppl: deltas[k],
                dst: strength,
                ddi: distance,
                dsp: row_dsp,
                indicator,
                lds_pair: value,
            });
        }
        start = end;
    }

    debug_assert!(pairs.len() <= pair_count(n));
    Ok(DocumentScore {
        report: ScoreReport {
            doc_id: grid.doc_id.clone(),
            source: grid.source.clone(),
            lds,
            mode: cfg.mode,
            n_segments: n,
            pairs_evaluated: pairs.len(),
            dsp_per_target,
            config_hash: cfg.hash(),
            config: cfg.clone(),
        },
        pairs: scores,
    })
}
