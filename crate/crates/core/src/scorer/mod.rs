//! Perplexity backends.
//!
//! Backends report a summed natural-log probability and a token count for a
//! target segment, optionally conditioned on a context segment that
//! contributes history but no loss terms. Turning that into a perplexity is
//! done here, in one place.

pub mod external;
pub mod ngram;

use std::sync::atomic::{AtomicUsize, Ordering};

use dashmap::DashMap;
use thiserror::Error;

use crate::corpus::{SegmentGrid, TokenId};
use crate::util::hash_tokens;

pub use external::{ExternalBackend, ExternalConfig};
pub use ngram::{NGramBackend, NGramModel};

/// Borrowed view of a segment: pipeline tokens plus the source text they cover.
#[derive(Clone, Copy, Debug)]
pub struct SegmentRef<'a> {
    pub tokens: &'a [TokenId],
    pub text: &'a str,
}

impl<'a> SegmentRef<'a> {
    pub fn new(tokens: &'a [TokenId], text: &'a str) -> Self {
        Self { tokens, text }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty() && self.text.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLikelihood {
    pub logprob_sum: f64,
    pub token_count: usize,
}

impl LogLikelihood {
    pub fn perplexity(&self) -> f64 {
        (-self.logprob_sum / self.token_count as f64).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Capabilities {
    pub max_context_tokens: usize,
    pub deterministic: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend i/o failure: {0}")]
    Io(String),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend protocol violation: {0}")]
    Protocol(String),
    #[error("backend reported: {0}")]
    Remote(String),
    #[error("input of {tokens} tokens exceeds backend context of {max}")]
    ContextTooLong { tokens: usize, max: usize },
    #[error("empty target")]
    EmptyTarget,
}

impl BackendError {
    /// Transport failures may succeed on a fresh connection.
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Io(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("segment {segment}: {source}")]
    Backend {
        segment: usize,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Call(#[from] BackendError),
    #[error("non-finite or non-positive perplexity {0}")]
    NonFinite(f64),
}

pub trait PerplexityBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Short stable description; part of the run configuration hash.
    fn describe(&self) -> String;

    /// Log-likelihood of `target` with `context` (if any) prepended as history.
    fn log_likelihood(
        &self,
        target: SegmentRef<'_>,
        context: Option<SegmentRef<'_>>,
    ) -> Result<LogLikelihood, BackendError>;

    /// Drops any internal memoization. Results must not change.
    fn clear_memo(&self) {}
}

impl<B: PerplexityBackend + ?Sized> PerplexityBackend for std::sync::Arc<B> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
    fn log_likelihood(
        &self,
        target: SegmentRef<'_>,
        context: Option<SegmentRef<'_>>,
    ) -> Result<LogLikelihood, BackendError> {
        (**self).log_likelihood(target, context)
    }
    fn clear_memo(&self) {
        (**self).clear_memo()
    }
}

fn checked_ppl(ll: LogLikelihood) -> Result<f64, ScoringError> {
    if ll.token_count == 0 {
        return Err(BackendError::Protocol("zero token count".into()).into());
    }
    let p = ll.perplexity();
    if p.is_finite() && p > 0.0 {
        Ok(p)
    } else {
        Err(ScoringError::NonFinite(p))
    }
}

fn check_len(backend: &dyn PerplexityBackend, tokens: usize) -> Result<(), BackendError> {
    let max = backend.capabilities().max_context_tokens;
    if tokens > max {
        return Err(BackendError::ContextTooLong { tokens, max });
    }
    Ok(())
}

/// Unconditional perplexity of `target`.
pub fn ppl(backend: &dyn PerplexityBackend, target: SegmentRef<'_>) -> Result<f64, ScoringError> {
    if target.is_empty() {
        return Err(BackendError::EmptyTarget.into());
    }
    check_len(backend, target.tokens.len())?;
    checked_ppl(backend.log_likelihood(target, None)?)
}

/// Perplexity of `target` with `context` prepended. An empty context is
/// exactly [`ppl`].
pub fn ppl_given(
    backend: &dyn PerplexityBackend,
    target: SegmentRef<'_>,
    context: SegmentRef<'_>,
) -> Result<f64, ScoringError> {
    if context.is_empty() {
        return ppl(backend, target);
    }
    if target.is_empty() {
        return Err(BackendError::EmptyTarget.into());
    }
    check_len(backend, target.tokens.len() + context.tokens.len())?;
    checked_ppl(backend.log_likelihood(target, Some(context))?)
}

/// Cache of unconditional segment perplexities, keyed by document id,
/// segment index and a hash of the segment's tokens.
#[derive(Default)]
pub struct PplCache {
    entries: DashMap<(String, usize, u64), f64>,
}

impl PplCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drops every entry belonging to `doc_id`.
    pub fn evict(&self, doc_id: &str) {
        self.entries.retain(|k, _| k.0 != doc_id);
    }

    /// `PPL(c_i)` for every segment of `grid`, one backend call per segment
    /// not already cached.
    pub fn unconditional(
        &self,
        backend: &dyn PerplexityBackend,
        grid: &SegmentGrid,
    ) -> Result<Vec<f64>, ScoringError> {
        grid.segments
            .iter()
            .enumerate()
            .map(|(idx, seg)| {
                let key = (grid.doc_id.clone(), idx, hash_tokens(&seg.tokens));
                if let Some(v) = self.entries.get(&key) {
                    return Ok(*v);
                }
                let v = ppl(backend, seg.as_ref()).map_err(|e| match e {
                    ScoringError::Call(source) => ScoringError::Backend { segment: idx, source },
                    other => other,
                })?;
                self.entries.insert(key, v);
                Ok(v)
            })
            .collect()
    }
}

/// Wraps a backend and counts calls. Used by tests and the benchmark.
pub struct CountingBackend<B> {
    inner: B,
    unconditional: AtomicUsize,
    conditional: AtomicUsize,
}

impl<B> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            unconditional: AtomicUsize::new(0),
            conditional: AtomicUsize::new(0),
        }
    }

    pub fn unconditional_calls(&self) -> usize {
        self.unconditional.load(Ordering::Relaxed)
    }

    pub fn conditional_calls(&self) -> usize {
        self.conditional.load(Ordering::Relaxed)
    }

    pub fn total_calls(&self) -> usize {
        self.unconditional_calls() + self.conditional_calls()
    }

    pub fn reset(&self) {
        self.unconditional.store(0, Ordering::Relaxed);
        self.conditional.store(0, Ordering::Relaxed);
    }
}

impl<B: PerplexityBackend> PerplexityBackend for CountingBackend<B> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }

    fn log_likelihood(
        &self,
        target: SegmentRef<'_>,
        context: Option<SegmentRef<'_>>,
    ) -> Result<LogLikelihood, BackendError> {
        let counter = if context.is_some() {
            &self.conditional
        } else {
            &self.unconditional
        };
        counter.fetch_add(1, Ordering::Relaxed);
        self.inner.log_likelihood(target, context)
    }

    fn clear_memo(&self) {
        self.inner.clear_memo()
    }
}
