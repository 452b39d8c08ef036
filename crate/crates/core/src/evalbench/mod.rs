//! Synthetic labeled test sets and the accuracy/throughput benchmark.
//!
//! A test set mixes positives (documents whose late segments reuse material
//! from early ones) with negatives of identical length. A backend is scored
//! by how many positives land in the top `k = n_positive` documents when the
//! whole set is ranked by LDS, and by how many documents it scores per second.

pub mod stats;
pub mod synth;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{segment, Document, TokenizerSpec};
use crate::lds::ScoreMode;
use crate::pipeline::{score_all, DocOutcome, PipelineConfig, PipelineError};
use crate::scorer::ngram::{DEFAULT_K, DEFAULT_ORDER};
use crate::scorer::{BackendError, Capabilities, LogLikelihood, NGramModel, PerplexityBackend, SegmentRef};
use crate::util::hash_tokens;

pub use synth::{generate, generate_mixed, Generator, Language};

pub const SYNTH_SOURCE: &str = "synthetic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_positive: usize,
    pub n_negative: usize,
    /// Every document has exactly this many whitespace tokens.
    pub doc_tokens: usize,
    /// Used to size the pieces of concatenation generators.
    pub segment_len: usize,
    /// Cycled through in order.
    pub positive: Vec<Generator>,
    pub negative: Vec<Generator>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_positive: 100,
            n_negative: 100,
            doc_tokens: 32768,
            segment_len: 128,
            positive: vec![Generator::KeyReference, Generator::EntityChain],
            negative: vec![Generator::ShortConcat, Generator::LocalOnly],
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDocument {
    pub doc: Document,
    pub positive: bool,
    pub generator: Generator,
}

/// Builds the labeled set. Documents are shuffled and given neutral ids
/// (`doc-0000`, ...) so neither position nor id carries the label.
pub fn generate_testset(spec: &SynthSpec, lang: &Language) -> Vec<LabeledDocument> {
    let mut plan: Vec<(bool, Generator)> = Vec::with_capacity(spec.n_positive + spec.n_negative);
    for (n, gens, label) in [(spec.n_positive, &spec.positive, true), (spec.n_negative, &spec.negative, false)] {
        assert!(n == 0 || !gens.is_empty(), "no generators for a non-empty class");
        plan.extend((0..n).map(|i| (label, gens[i % gens.len()])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    plan.shuffle(&mut rng);
    plan.into_iter()
        .enumerate()
        .map(|(idx, (positive, generator))| {
            let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(idx as u64);
            let text = generate(generator, lang, spec.doc_tokens, spec.segment_len, seed);
            LabeledDocument {
                doc: Document::new(format!("doc-{idx:04}"), SYNTH_SOURCE, text),
                positive,
                generator,
            }
        })
        .collect()
}

/// Default-order model trained on `n_docs` background documents of `lang`.
pub fn background_model(lang: &Language, n_docs: usize, seed: u64) -> NGramModel {
    let tok = TokenizerSpec::whitespace();
    let seqs: Vec<Vec<u64>> = lang.background(n_docs, 2000, seed).iter().map(|t| tok.token_ids(t)).collect();
    NGramModel::train(&seqs, DEFAULT_ORDER, DEFAULT_K).expect("background corpus is non-empty")
}

/// Knows which segments belong to positive documents and reports a large,
/// pair-specific perplexity drop only for those.
pub struct OracleBackend {
    positive_segments: HashSet<u64>,
}

impl OracleBackend {
    pub fn new(testset: &[LabeledDocument], tokenizer: &TokenizerSpec, segment_len: usize, max_tokens: usize) -> Self {
        let mut positive_segments = HashSet::new();
        for d in testset.iter().filter(|d| d.positive) {
            let doc = d.doc.clone().tokenized(tokenizer);
            if let Ok(grid) = segment(&doc, segment_len, max_tokens) {
                positive_segments.extend(grid.segments.iter().map(|s| hash_tokens(&s.tokens)));
            }
        }
        Self { positive_segments }
    }
}

impl PerplexityBackend for OracleBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_context_tokens: usize::MAX,
            deterministic: true,
        }
    }

    fn describe(&self) -> String {
        "oracle".into()
    }

    fn log_likelihood(
        &self,
        target: SegmentRef<'_>,
        context: Option<SegmentRef<'_>>,
    ) -> Result<LogLikelihood, BackendError> {
        let n = target.tokens.len();
        let t = hash_tokens(target.tokens);
        let ppl = match context {
            Some(c) if self.positive_segments.contains(&t) => {
                let mixed = t.rotate_left(17) ^ hash_tokens(c.tokens);
                10.0 + (mixed % 1000) as f64 / 200.0
            }
            _ => 20.0,
        };
        Ok(LogLikelihood {
            logprob_sum: -(n as f64) * ppl.ln(),
            token_count: n,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub backend: String,
    pub samples: usize,
    pub workers: usize,
    pub n_docs: usize,
    /// Fraction of positives among the top `k = n_positive` documents.
    pub accuracy: f64,
    /// Probability of at least this accuracy under a random ranking.
    pub p_value: f64,
    pub docs_per_second: f64,
    pub wall_secs: f64,
    /// Set when the cell could not be completed.
    pub error: Option<String>,
}

/// Ranks by LDS (descending, ties by id) and returns the positive fraction of the top `k`.
pub fn accuracy_at_k(scored: &[(String, f64, bool)], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let mut order: Vec<&(String, f64, bool)> = scored.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    order.iter().take(k).filter(|d| d.2).count() as f64 / k as f64
}

fn run_cell(
    testset: &[LabeledDocument],
    label: &str,
    backend: &dyn PerplexityBackend,
    cfg: &PipelineConfig,
) -> Result<BenchResult, String> {
    let docs = testset.iter().map(|d| d.doc.clone());
    let started = Instant::now();
    let (outcomes, _) = score_all(docs, backend, cfg).map_err(|e: PipelineError| e.to_string())?;
    let wall_secs = started.elapsed().as_secs_f64();
    let mut scored = Vec::with_capacity(outcomes.len());
    for (o, d) in outcomes.iter().zip(testset) {
        match o {
            DocOutcome::Scored(s) => scored.push((s.report.doc_id.clone(), s.report.lds, d.positive)),
            DocOutcome::Excluded(x) | DocOutcome::Failed(x) => {
                return Err(format!("{}: {}", x.doc_id, x.reason));
            }
        }
    }
    let n_pos = testset.iter().filter(|d| d.positive).count();
    let accuracy = accuracy_at_k(&scored, n_pos);
    let hits = (accuracy * n_pos as f64).round() as u64;
    Ok(BenchResult {
        backend: label.to_string(),
        samples: cfg.lds.samples,
        workers: cfg.workers,
        n_docs: testset.len(),
        accuracy,
        p_value: stats::top_k_p_value(testset.len() as u64, n_pos as u64, n_pos as u64, hits),
        docs_per_second: testset.len() as f64 / wall_secs.max(1e-9),
        wall_secs,
        error: None,
    })
}

/// Runs every `(backend, T)` cell sequentially, in sampled mode. A failing
/// cell is reported with `error` set and does not stop the others.
pub fn run_bench(
    testset: &[LabeledDocument],
    backends: &[(&str, &dyn PerplexityBackend)],
    samples: &[usize],
    base: &PipelineConfig,
) -> Vec<BenchResult> {
    let mut out = Vec::new();
    for &(label, backend) in backends {
        for &t in samples {
            let mut cfg = base.clone();
            cfg.lds.mode = ScoreMode::Sampled;
            cfg.lds.samples = t;
            cfg.config_hash = cfg.lds.hash();
            backend.clear_memo();
            log::info!("bench cell backend={label} T={t}");
            let result = run_cell(testset, label, backend, &cfg).unwrap_or_else(|e| BenchResult {
                backend: label.to_string(),
                samples: t,
                workers: cfg.workers,
                n_docs: testset.len(),
                accuracy: 0.0,
                p_value: 1.0,
                docs_per_second: 0.0,
                wall_secs: 0.0,
                error: Some(e),
            });
            out.push(result);
        }
    }
    out
}

pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("samples,backend,docs_per_second,accuracy,p_value,wall_secs,workers,status\n");
    for r in results {
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
        };
        writeln!(
            out,
            "{},{},{:.4},{:.4},{:.3e},{:.3},{},{}",
            r.samples, r.backend, r.docs_per_second, r.accuracy, r.p_value, r.wall_secs, r.workers, status
        )
        .unwrap();
    }
    out
}

pub fn bench_table(results: &[BenchResult]) -> String {
    let width = results.iter().map(|r| r.backend.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:>8}  {:<width$}  {:>10}  {:>8}\n", "samples", "backend", "docs/s", "accuracy");
    for r in results {
        match &r.error {
            None => writeln!(
                out,
                "{:>8}  {:<width$}  {:>10.3}  {:>7.1}%",
                r.samples,
                r.backend,
                r.docs_per_second,
                r.accuracy * 100.0
            ),
            Some(e) => writeln!(out, "{:>8}  {:<width$}  failed: {e}", r.samples, r.backend),
        }
        .unwrap();
    }
    out
}
