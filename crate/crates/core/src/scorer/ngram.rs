//! Add-k smoothed n-gram language model and the built-in perplexity backend.
//!
//! The model assigns `P(w | h) = (c(h, w) + k) / (c(h) + k·V)` where `h` is
//! the last `order - 1` tokens (fewer at the start of a sequence), `c(h)`
//! counts occurrences of `h` followed by any token, and `V` is the observed
//! vocabulary plus one unknown symbol. Histories never seen in training
//! therefore get the uniform distribution `1 / V`.
//!
//! [`NGramBackend`] optionally mixes in a cache model estimated from the
//! conditioning history itself (context followed by the already-scored
//! target prefix):
//!
//! ```text
//! p(w) = (1 - λ) · P_ngram(w | h) + λ · P_cache(w | history)
//! ```
//!
//! `P_cache` averages relative frequencies in the history over every suffix
//! length (0 to `order - 1` tokens) that has been followed by something
//! before. With `λ = 0` the backend is the plain n-gram model. With
//! `λ > 0`, tokens that appeared in the context become cheaper to predict,
//! which is what lets conditional perplexity reflect long-range reuse.

use std::hash::Hasher;
use std::io::{Read, Write};
use std::sync::Arc;

use dashmap::DashMap;
use rustc_hash::{FxHashMap, FxHasher};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, Capabilities, LogLikelihood, PerplexityBackend, SegmentRef};
use crate::corpus::TokenId;
use crate::util::{hash_tokens, sha256_hex};

pub const MAX_ORDER: usize = 5;
pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_K: f64 = 0.01;
/// Default weight of the history cache in [`NGramBackend`].
pub const DEFAULT_CACHE_WEIGHT: f64 = 0.1;
pub const FORMAT_NAME: &str = "lds-ngram";
pub const FORMAT_VERSION: u32 = 1;

const ID_BITS: u32 = 24;
const MAX_VOCAB: usize = (1 << ID_BITS) - 1;

#[derive(Debug, Error)]
pub enum NGramError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("order must be in 1..={MAX_ORDER}, got {0}")]
    InvalidOrder(usize),
    #[error("smoothing constant must be finite and > 0, got {0}")]
    InvalidSmoothing(f64),
    #[error("vocabulary of {0} types exceeds the supported maximum")]
    VocabularyTooLarge(usize),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense vocabulary index. `0` is the unknown symbol.
pub type VocabIndex = u32;

pub const UNKNOWN_INDEX: VocabIndex = 0;

fn pack(ids: &[VocabIndex]) -> u128 {
    ids.iter().fold(0u128, |acc, &id| (acc << ID_BITS) | id as u128)
}

#[derive(Clone, Debug)]
pub struct NGramModel {
    order: usize,
    k: f64,
    /// Raw token id for vocabulary index `i + 1`, ascending.
    vocab: Vec<TokenId>,
    index: FxHashMap<TokenId, VocabIndex>,
    /// `grams[o - 1]`: counts of o-grams.
    grams: Vec<FxHashMap<u128, u32>>,
    /// `histories[o - 1]`: for o >= 2, how often each (o-1)-gram is followed by a token.
    histories: Vec<FxHashMap<u128, u32>>,
    total: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    order: usize,
    k: f64,
    vocab: Vec<TokenId>,
    /// `counts[o - 1]` lists `[indices, count]` sorted by indices.
    counts: Vec<Vec<(Vec<VocabIndex>, u32)>>,
}

impl NGramModel {
    /// Trains on token sequences. Sequences are independent: no n-gram spans two of them.
    pub fn train<S: AsRef<[TokenId]>>(sequences: &[S], order: usize, k: f64) -> Result<Self, NGramError> {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(NGramError::InvalidOrder(order));
        }
        if !(k.is_finite() && k > 0.0) {
            return Err(NGramError::InvalidSmoothing(k));
        }
        let mut vocab: Vec<TokenId> = sequences.iter().flat_map(|s| s.as_ref().iter().copied()).collect();
        if vocab.is_empty() {
            return Err(NGramError::EmptyCorpus);
        }
        vocab.sort_unstable();
        vocab.dedup();
        if vocab.len() > MAX_VOCAB {
            return Err(NGramError::VocabularyTooLarge(vocab.len()));
        }
        let index = index_of(&vocab);
        let mut model = Self {
            order,
            k,
            vocab,
            index,
            grams: vec![FxHashMap::default(); order],
            histories: vec![FxHashMap::default(); order],
            total: 0,
        };
        for seq in sequences {
            let idx: Vec<VocabIndex> = seq.as_ref().iter().map(|t| model.index[t]).collect();
            for end in 1..=idx.len() {
                for o in 1..=order.min(end) {
                    *model.grams[o - 1].entry(pack(&idx[end - o..end])).or_default() += 1;
                }
            }
        }
        model.rebuild_histories();
        Ok(model)
    }

    fn rebuild_histories(&mut self) {
        self.total = self.grams[0].values().map(|&c| c as u64).sum();
        for o in 2..=self.order {
            let mut h = FxHashMap::default();
            for (&key, &c) in &self.grams[o - 1] {
                *h.entry(key >> ID_BITS).or_insert(0u32) += c;
            }
            self.histories[o - 1] = h;
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    /// Observed types plus the unknown symbol.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 1
    }

    pub fn index(&self, token: TokenId) -> VocabIndex {
        self.index.get(&token).copied().unwrap_or(UNKNOWN_INDEX)
    }

    /// Training count of the n-gram given by raw token ids (0 if any is unknown).
    pub fn count(&self, ngram: &[TokenId]) -> u32 {
        if ngram.is_empty() || ngram.len() > self.order {
            return 0;
        }
        let idx: Vec<_> = ngram.iter().map(|&t| self.index(t)).collect();
        if idx.contains(&UNKNOWN_INDEX) {
            return 0;
        }
        self.grams[idx.len() - 1].get(&pack(&idx)).copied().unwrap_or(0)
    }

    /// `P(w | history)`, using at most the last `order - 1` history entries.
    pub fn prob(&self, history: &[VocabIndex], w: VocabIndex) -> f64 {
        let h = &history[history.len().saturating_sub(self.order - 1)..];
        let o = h.len() + 1;
        let hist_count = if o == 1 {
            self.total as f64
        } else {
            self.histories[o - 1].get(&pack(h)).copied().unwrap_or(0) as f64
        };
        let key = (pack(h) << ID_BITS) | w as u128;
        let gram_count = self.grams[o - 1].get(&key).copied().unwrap_or(0) as f64;
        (gram_count + self.k) / (hist_count + self.k * self.vocab_size() as f64)
    }

    /// Same as [`prob`](Self::prob) but on raw token ids.
    pub fn prob_tokens(&self, history: &[TokenId], w: TokenId) -> f64 {
        let h: Vec<_> = history.iter().map(|&t| self.index(t)).collect();
        self.prob(&h, self.index(w))
    }

    /// Writes the canonical JSON form. Identical models produce identical bytes.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), NGramError> {
        let counts = self
            .grams
            .iter()
            .enumerate()
            .map(|(o, map)| {
                let mut rows: Vec<_> = map.iter().map(|(&key, &c)| (unpack(key, o + 1), c)).collect();
                rows.sort_unstable();
                rows
            })
            .collect();
        let file = ModelFile {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            order: self.order,
            k: self.k,
            vocab: self.vocab.clone(),
            counts,
        };
        serde_json::to_writer(&mut out, &file).map_err(|e| NGramError::Format(e.to_string()))?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self, NGramError> {
        let file: ModelFile = serde_json::from_reader(input).map_err(|e| NGramError::Format(e.to_string()))?;
        if file.format != FORMAT_NAME {
            return Err(NGramError::Format(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != FORMAT_VERSION {
            return Err(NGramError::Format(format!("unsupported version {}", file.version)));
        }
        if !(1..=MAX_ORDER).contains(&file.order) {
            return Err(NGramError::InvalidOrder(file.order));
        }
        if !(file.k.is_finite() && file.k > 0.0) {
            return Err(NGramError::InvalidSmoothing(file.k));
        }
        if file.vocab.windows(2).any(|w| w[0] >= w[1]) || file.vocab.len() > MAX_VOCAB {
            return Err(NGramError::Format("vocabulary must be strictly ascending".into()));
        }
        if file.counts.len() != file.order {
            return Err(NGramError::Format("count tables do not match order".into()));
        }
        let v = file.vocab.len() as VocabIndex;
        let mut grams = Vec::with_capacity(file.order);
        for (o, rows) in file.counts.iter().enumerate() {
            let mut map = FxHashMap::default();
            map.reserve(rows.len());
            for (ids, c) in rows {
                if ids.len() != o + 1 || ids.iter().any(|&i| i == UNKNOWN_INDEX || i > v) {
                    return Err(NGramError::Format(format!("bad {}-gram entry {ids:?}", o + 1)));
                }
                map.insert(pack(ids), *c);
            }
            grams.push(map);
        }
        let mut model = Self {
            order: file.order,
            k: file.k,
            index: index_of(&file.vocab),
            vocab: file.vocab,
            grams,
            histories: vec![FxHashMap::default(); file.order],
            total: 0,
        };
        model.rebuild_histories();
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), NGramError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, NGramError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }

    /// Content fingerprint of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes(), 16)
    }
}

fn index_of(vocab: &[TokenId]) -> FxHashMap<TokenId, VocabIndex> {
    vocab.iter().enumerate().map(|(i, &t)| (t, i as VocabIndex + 1)).collect()
}

fn unpack(mut key: u128, order: usize) -> Vec<VocabIndex> {
    let mask = (1u128 << ID_BITS) - 1;
    let mut out = vec![0; order];
    for slot in out.iter_mut().rev() {
        *slot = (key & mask) as VocabIndex;
        key >>= ID_BITS;
    }
    out
}

/// Frequency model over a growing token history, used as the cache component.
#[derive(Clone, Debug, Default)]
struct HistoryCache {
    order: usize,
    seq: Vec<TokenId>,
    grams: FxHashMap<u64, u32>,
    histories: FxHashMap<u64, u32>,
}

fn cache_key(order: usize, head: &[TokenId], last: Option<TokenId>) -> u64 {
    let mut h = FxHasher::default();
    h.write_usize(order);
    for &t in head {
        h.write_u64(t);
    }
    if let Some(t) = last {
        h.write_u64(t);
    }
    h.finish()
}

impl HistoryCache {
    fn reset(&mut self, order: usize) {
        self.order = order;
        self.seq.clear();
        self.grams.clear();
        self.histories.clear();
    }

    fn push(&mut self, token: TokenId) {
        self.seq.push(token);
        let len = self.seq.len();
        for o in 1..=self.order.min(len) {
            let gram = &self.seq[len - o..];
            *self.grams.entry(cache_key(o, gram, None)).or_default() += 1;
            if o >= 2 {
                *self.histories.entry(cache_key(o, &gram[..o - 1], None)).or_default() += 1;
            }
        }
    }

    /// Normalized cache estimate for the next token, or `None` with an empty
    /// history. Averages the relative frequencies of every history order
    /// that has been followed by something before.
    fn prob(&self, w: TokenId) -> Option<f64> {
        let len = self.seq.len();
        if len == 0 {
            return None;
        }
        let mut sum = self.grams.get(&cache_key(1, &[], Some(w))).copied().unwrap_or(0) as f64 / len as f64;
        let mut used = 1.0;
        for o in 2..=self.order.min(len + 1) {
            let h = &self.seq[len - (o - 1)..];
            let hist = self.histories.get(&cache_key(o, h, None)).copied().unwrap_or(0);
            if hist > 0 {
                let c = self.grams.get(&cache_key(o, h, Some(w))).copied().unwrap_or(0);
                sum += c as f64 / hist as f64;
                used += 1.0;
            }
        }
        Some(sum / used)
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<HistoryCache> = std::cell::RefCell::new(HistoryCache::default());
}

/// Past this many memoized targets the memo is cleared.
const MEMO_CAPACITY: usize = 1 << 16;

/// The built-in backend: an [`NGramModel`] plus an optional history cache.
pub struct NGramBackend {
    model: Arc<NGramModel>,
    cache_weight: f64,
    /// Per-target n-gram probabilities for positions whose history lies inside the target.
    memo: DashMap<u64, Arc<[f64]>>,
}

impl NGramBackend {
    pub fn new(model: Arc<NGramModel>) -> Self {
        Self::with_cache_weight(model, 0.0)
    }

    /// `cache_weight` is clamped to `[0, 1)`.
    pub fn with_cache_weight(model: Arc<NGramModel>, cache_weight: f64) -> Self {
        let cache_weight = if cache_weight.is_finite() {
            cache_weight.clamp(0.0, 0.999)
        } else {
            0.0
        };
        Self {
            model,
            cache_weight,
            memo: DashMap::new(),
        }
    }

    pub fn model(&self) -> &NGramModel {
        &self.model
    }

    pub fn cache_weight(&self) -> f64 {
        self.cache_weight
    }

    fn inner_probs(&self, target: &[VocabIndex], raw: &[TokenId]) -> Arc<[f64]> {
        let key = hash_tokens(raw);
        if let Some(v) = self.memo.get(&key) {
            return v.clone();
        }
        let skip = self.model.order - 1;
        let probs: Arc<[f64]> = (skip.min(target.len())..target.len())
            .map(|t| self.model.prob(&target[t - skip..t], target[t]))
            .collect();
        if self.memo.len() >= MEMO_CAPACITY {
            self.memo.clear();
        }
        self.memo.insert(key, probs.clone());
        probs
    }
}

impl PerplexityBackend for NGramBackend {
    fn clear_memo(&self) {
        self.memo.clear();
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_context_tokens: usize::MAX,
            deterministic: true,
        }
    }

    fn describe(&self) -> String {
        format!(
            "ngram(order={},k={},cache={},model={})",
            self.model.order,
            self.model.k,
            self.cache_weight,
            self.model.fingerprint()
        )
    }

    fn log_likelihood(
        &self,
        target: SegmentRef<'_>,
        context: Option<SegmentRef<'_>>,
    ) -> Result<LogLikelihood, BackendError> {
        if target.tokens.is_empty() {
            return Err(BackendError::EmptyTarget);
        }
        let ctx: &[TokenId] = context.map_or(&[], |c| c.tokens);
        let model = &*self.model;
        let skip = model.order - 1;
        let ctx_tail: Vec<VocabIndex> = ctx[ctx.len().saturating_sub(skip)..]
            .iter()
            .map(|&t| model.index(t))
            .collect();
        let tgt: Vec<VocabIndex> = target.tokens.iter().map(|&t| model.index(t)).collect();
        let inner = self.inner_probs(&tgt, target.tokens);

        // n-gram probability of target position t; only the first `skip`
        // positions can see context tokens.
        let mut boundary = Vec::with_capacity(skip);
        let mut hist: Vec<VocabIndex> = ctx_tail;
        for &w in &tgt[..skip.min(tgt.len())] {
            boundary.push(model.prob(&hist, w));
            hist.push(w);
        }
        let ngram_prob = |t: usize| {
            if t < skip {
                boundary[t]
            } else {
                inner[t - skip]
            }
        };

        let lambda = self.cache_weight;
        let mut logprob_sum = 0.0;
        if lambda == 0.0 {
            for t in 0..tgt.len() {
                logprob_sum += ngram_prob(t).ln();
            }
        } else {
            SCRATCH.with(|cell| {
                let mut cache = cell.borrow_mut();
                cache.reset(model.order.max(1));
                for &t in ctx {
                    cache.push(t);
                }
                for (t, &w) in target.tokens.iter().enumerate() {
                    let p_ng = ngram_prob(t);
                    let p = match cache.prob(w) {
                        Some(pc) => (1.0 - lambda) * p_ng + lambda * pc,
                        None => p_ng,
                    };
                    logprob_sum += p.ln();
                    cache.push(w);
                }
            });
        }
        Ok(LogLikelihood {
            logprob_sum,
            token_count: tgt.len(),
        })
    }
}
