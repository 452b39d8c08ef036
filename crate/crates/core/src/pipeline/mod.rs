//! Corpus scoring with a bounded worker pool, plus ranking and selection.

mod select;

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{segment, CorpusError, Document, TokenizerSpec};
use crate::lds::{score_grid, DocumentScore, LdsConfig, LdsError};
use crate::scorer::{PerplexityBackend, PplCache};

pub use select::{
    random_baseline, rank_and_select, select, GroupSelection, GroupStats, RankedDoc, SelectionError,
    SelectionManifest, SelectionOptions, Strategy, StrategyComparison,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] LdsError),
    #[error("workers must be >= 1")]
    NoWorkers,
    #[error("invalid segmentation: {0}")]
    Segmentation(CorpusError),
    #[error("cannot start worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub tokenizer: TokenizerSpec,
    pub segment_len: usize,
    pub max_tokens: usize,
    pub lds: LdsConfig,
    pub workers: usize,
    /// Stamped into every report; defaults to the LDS config hash.
    pub config_hash: String,
}

impl PipelineConfig {
    pub fn new(lds: LdsConfig, segment_len: usize, max_tokens: usize) -> Self {
        Self {
            tokenizer: TokenizerSpec::whitespace(),
            segment_len,
            max_tokens,
            config_hash: lds.hash(),
            lds,
            workers: 1,
        }
    }
}

/// A document that produced no report, and why.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedDoc {
    pub doc_id: String,
    pub source: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DocOutcome {
    Scored(DocumentScore),
    /// Too short to form two segments.
    Excluded(DroppedDoc),
    /// Scoring failed, usually a backend error.
    Failed(DroppedDoc),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ScoreStats {
    pub scored: usize,
    pub excluded: usize,
    pub failed: usize,
    /// False if the run was cancelled before the input was exhausted.
    pub complete: bool,
    pub elapsed_secs: f64,
    pub docs_per_second: f64,
}

/// Scores one document end to end: tokenize, segment, score.
pub fn score_document(
    mut doc: Document,
    backend: &dyn PerplexityBackend,
    cache: &PplCache,
    cfg: &PipelineConfig,
) -> DocOutcome {
    if doc.tokens.is_empty() {
        doc.tokenize(&cfg.tokenizer);
    }
    let dropped = |reason: String| DroppedDoc {
        doc_id: doc.id.clone(),
        source: doc.source.clone(),
        reason,
    };
    let grid = match segment(&doc, cfg.segment_len, cfg.max_tokens) {
        Ok(g) => g,
        Err(e) => return DocOutcome::Excluded(dropped(e.to_string())),
    };
    let outcome = match score_grid(&grid, backend, cache, &cfg.lds) {
        Ok(mut s) => {
            s.report.config_hash = cfg.config_hash.clone();
            DocOutcome::Scored(s)
        }
        Err(e) => DocOutcome::Failed(dropped(e.to_string())),
    };
    cache.evict(&doc.id);
    outcome
}

/// Scores a document stream on `cfg.workers` threads and hands outcomes to
/// `sink` in input order.
///
/// Setting `cancel` stops intake; documents already in flight are finished
/// and emitted, and the returned stats are marked incomplete.
pub fn score_corpus<I, F>(
    docs: I,
    backend: &dyn PerplexityBackend,
    cfg: &PipelineConfig,
    cancel: Option<&AtomicBool>,
    mut sink: F,
) -> Result<ScoreStats, PipelineError>
where
    I: IntoIterator<Item = Document>,
    F: FnMut(DocOutcome),
{
    cfg.lds.validate()?;
    if cfg.workers == 0 {
        return Err(PipelineError::NoWorkers);
    }
    if cfg.segment_len == 0 || cfg.max_tokens < 2 * cfg.segment_len {
        return Err(PipelineError::Segmentation(CorpusError::InvalidSegmentation {
            segment_len: cfg.segment_len,
            max_tokens: cfg.max_tokens,
        }));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    let cache = PplCache::new();
    let started = Instant::now();
    let mut stats = ScoreStats {
        complete: true,
        ..ScoreStats::default()
    };
    let chunk = cfg.workers * 2;
    let mut docs = docs.into_iter();
    loop {
        if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            stats.complete = false;
            break;
        }
        let batch: Vec<Document> = docs.by_ref().take(chunk).collect();
        if batch.is_empty() {
            break;
        }
        let outcomes: Vec<DocOutcome> = pool.install(|| {
            batch
                .into_par_iter()
                .map(|d| score_document(d, backend, &cache, cfg))
                .collect()
        });
        for o in outcomes {
            match &o {
                DocOutcome::Scored(_) => stats.scored += 1,
                DocOutcome::Excluded(_) => stats.excluded += 1,
                DocOutcome::Failed(d) => {
                    log::warn!("document {} failed: {}", d.doc_id, d.reason);
                    stats.failed += 1;
                }
            }
            sink(o);
        }
    }
    stats.elapsed_secs = started.elapsed().as_secs_f64();
    let done = (stats.scored + stats.failed) as f64;
    stats.docs_per_second = if stats.elapsed_secs > 0.0 {
        done / stats.elapsed_secs
    } else {
        0.0
    };
    Ok(stats)
}

/// Convenience wrapper collecting every outcome.
pub fn score_all<I: IntoIterator<Item = Document>>(
    docs: I,
    backend: &dyn PerplexityBackend,
    cfg: &PipelineConfig,
) -> Result<(Vec<DocOutcome>, ScoreStats), PipelineError> {
    let mut out = Vec::new();
    let stats = score_corpus(docs, backend, cfg, None, |o| out.push(o))?;
    Ok((out, stats))
}
