//! Property checks, each run for a caller-chosen number of generated cases.
//!
//! They are plain functions so both the `invariants` target (one `#[test]`
//! each) and the `acceptance` target (timed, all together) can drive them.

use std::collections::HashSet;
use std::fmt::Debug;
use std::sync::Arc;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};

use lds_core::corpus::{segment, Document, Segment, SegmentGrid};
use lds_core::evalbench::accuracy_at_k;
use lds_core::lds::{ddi, dsp, dst, lds_exact, lds_sampled, pair_count, DspVariant, LdsConfig, ScoreMode};
use lds_core::pipeline::{select, DroppedDoc, SelectionOptions, Strategy as SelStrategy};
use lds_core::scorer::{ppl, ppl_given, BackendError, Capabilities, LogLikelihood, NGramBackend, NGramModel};
use lds_core::scorer::{PerplexityBackend, PplCache, SegmentRef};
use lds_core::viz::{parse_csv, render_heatmap, ColorScale, HeatmapSpec, MASK_RGB};
use lds_core::{PairScore, ScoreReport, TokenId};

use super::{scripted_grid, ContentBackend, ScriptedBackend};

pub type Property = fn(u32) -> Result<(), String>;

pub const ALL: &[(&str, Property)] = &[
    ("segmentation keeps an exact prefix within bounds", segmentation_prefix_and_bounds),
    ("n-gram conditionals sum to one", ngram_normalization),
    ("empty context is identity; reload is bit-deterministic", backend_identity_and_determinism),
    ("ppl > 0, and ppl = 1 iff every probability is 1", perplexity_positivity),
    ("dst < 1, ddi in (0,1], dsp in [0,1]", score_bounds),
    ("ddi strictly decreases in j", ddi_monotone),
    ("dsp is shift invariant", dsp_shift_invariance),
    ("identical segments give LDS = 0", repetition_annihilation),
    ("scaling alpha and beta keeps the ranking", ranking_invariance),
    ("exhaustive sampling equals exact mode", exhaustive_equals_exact),
    ("tau above every dst forces LDS = 0", gate_semantics),
    ("selection partitions inputs and beats random", selection_partition_and_means),
    ("heatmap CSV round-trips dst exactly", csv_round_trip),
    ("heatmap image size and mask color", image_shape_and_mask),
    ("accuracy ignores document order", accuracy_order_invariance),
];

fn run<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

fn fail(msg: impl Into<String>) -> TestCaseError {
    TestCaseError::fail(msg.into())
}

pub fn segmentation_prefix_and_bounds(cases: u32) -> Result<(), String> {
    let strat = (0usize..3000, 1usize..200, 0usize..5000);
    run(cases, strat, |(len, l, extra)| {
        let m = 2 * l + extra;
        let tokens: Vec<TokenId> = (0..len as TokenId).map(|t| t * 31 % 97).collect();
        let mut doc = Document::new("d", "s", "");
        doc.tokens = tokens.clone();
        let kept = len.min(m);
        match segment(&doc, l, m) {
            Ok(grid) => {
                let n = grid.n_segments();
                prop_assert!(n * l <= kept && kept < (n + 1) * l);
                let flat: Vec<TokenId> = grid.segments.iter().flat_map(|s| s.tokens.clone()).collect();
                prop_assert_eq!(&flat[..], &tokens[..n * l]);
                prop_assert_eq!(segment(&doc, l, m).unwrap(), grid);
            }
            Err(_) => prop_assert!(kept < 2 * l),
        }
        Ok(())
    })
}

fn small_corpus() -> impl Strategy<Value = Vec<Vec<TokenId>>> {
    prop::collection::vec(prop::collection::vec(1u64..30, 1..40), 1..5)
}

pub fn ngram_normalization(cases: u32) -> Result<(), String> {
    let strat = (small_corpus(), 1usize..=5, 0.001f64..2.0, prop::collection::vec(0u64..40, 0..6));
    run(cases, strat, |(corpus, order, k, history)| {
        let m = NGramModel::train(&corpus, order, k).map_err(|e| fail(e.to_string()))?;
        let h: Vec<u32> = history.iter().map(|&t| m.index(t)).collect();
        let total: f64 = (0..m.vocab_size() as u32).map(|w| m.prob(&h, w)).sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "sum = {}", total);
        Ok(())
    })
}

pub fn backend_identity_and_determinism(cases: u32) -> Result<(), String> {
    let strat = (
        small_corpus(),
        1usize..=4,
        prop::collection::vec(0u64..40, 1..30),
        prop::collection::vec(0u64..40, 1..30),
        0.0f64..0.5,
    );
    run(cases, strat, |(corpus, order, target, context, lambda)| {
        let m = NGramModel::train(&corpus, order, 0.05).unwrap();
        let reloaded = NGramModel::read_from(&m.to_bytes()[..]).unwrap();
        let a = NGramBackend::with_cache_weight(Arc::new(m), lambda);
        let b = NGramBackend::with_cache_weight(Arc::new(reloaded), lambda);
        let t = SegmentRef::new(&target, "");
        let c = SegmentRef::new(&context, "");
        let empty = SegmentRef::new(&[], "");
        let alone = ppl(&a, t).unwrap();
        prop_assert!(alone > 0.0 && alone.is_finite());
        prop_assert_eq!(ppl_given(&a, t, empty).unwrap().to_bits(), alone.to_bits());
        prop_assert_eq!(ppl_given(&a, t, c).unwrap().to_bits(), ppl_given(&b, t, c).unwrap().to_bits());
        prop_assert_eq!(ppl(&b, t).unwrap().to_bits(), alone.to_bits());
        Ok(())
    })
}

struct PerToken(Vec<f64>);

impl PerplexityBackend for PerToken {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            max_context_tokens: usize::MAX,
            deterministic: true,
        }
    }
    fn describe(&self) -> String {
        "per-token".into()
    }
    fn log_likelihood(&self, t: SegmentRef<'_>, _: Option<SegmentRef<'_>>) -> Result<LogLikelihood, BackendError> {
        Ok(LogLikelihood {
            logprob_sum: t.tokens.iter().map(|&i| self.0[i as usize].ln()).sum(),
            token_count: t.tokens.len(),
        })
    }
}

pub fn perplexity_positivity(cases: u32) -> Result<(), String> {
    let prob = prop_oneof![Just(1.0f64), 1e-6f64..1.0];
    run(cases, prop::collection::vec(prob, 1..50), |probs| {
        let tokens: Vec<TokenId> = (0..probs.len() as TokenId).collect();
        let all_one = probs.iter().all(|&p| p == 1.0);
        let v = ppl(&PerToken(probs), SegmentRef::new(&tokens, "")).unwrap();
        prop_assert!(v > 0.0);
        prop_assert_eq!(v == 1.0, all_one, "ppl = {}", v);
        Ok(())
    })
}

pub fn score_bounds(cases: u32) -> Result<(), String> {
    let strat = (
        1e-3f64..1e6,
        1e-3f64..1e6,
        2usize..5000,
        any::<prop::sample::Index>(),
        any::<prop::sample::Index>(),
        prop::collection::vec(-1e6f64..1e6, 1..60),
    );
    run(cases, strat, |(p, q, n, ii, jj, deltas)| {
        prop_assert!(dst(p, q).unwrap() < 1.0);
        let i = 2 + ii.index(n - 1);
        let j = 1 + jj.index(i - 1);
        let d = ddi(i, j, n);
        prop_assert!(d > 0.0 && d <= 1.0);
        let s = dsp(&deltas);
        prop_assert!((0.0..=1.0).contains(&s), "dsp = {}", s);
        Ok(())
    })
}

pub fn ddi_monotone(cases: u32) -> Result<(), String> {
    let strat = (3usize..5000, any::<prop::sample::Index>(), any::<prop::sample::Index>());
    run(cases, strat, |(n, ii, jj)| {
        let i = 3 + ii.index(n - 2);
        let j = 1 + jj.index(i - 2);
        prop_assert!(ddi(i, j, n) > ddi(i, j + 1, n));
        Ok(())
    })
}

pub fn dsp_shift_invariance(cases: u32) -> Result<(), String> {
    let strat = (prop::collection::vec(-500i32..500, 1..40), -100_000i32..100_000, -1e3f64..1e3);
    run(cases, strat, |(ints, shift, fshift)| {
        let base: Vec<f64> = ints.iter().map(|&v| v as f64).collect();
        let shifted: Vec<f64> = ints.iter().map(|&v| (v + shift) as f64).collect();
        prop_assert_eq!(dsp(&base).to_bits(), dsp(&shifted).to_bits());
        let fs: Vec<f64> = base.iter().map(|v| v * 0.37 + fshift).collect();
        let scaled: Vec<f64> = base.iter().map(|v| v * 0.37).collect();
        prop_assert!((dsp(&fs) - dsp(&scaled)).abs() < 1e-9);
        Ok(())
    })
}

fn repeated_grid(n: usize, token: TokenId, len: usize) -> SegmentGrid {
    let segs = (0..n).map(|_| Segment::new(vec![token; len], "")).collect();
    SegmentGrid::from_segments("rep", "s", segs).unwrap()
}

pub fn repetition_annihilation(cases: u32) -> Result<(), String> {
    let strat = (2usize..14, 0u64..1000, 1usize..8, 1usize..400);
    run(cases, strat, |(n, token, len, samples)| {
        let grid = repeated_grid(n, token, len);
        let cache = PplCache::new();
        let exact = lds_exact(&grid, &ContentBackend, &cache, &LdsConfig { tau: -1.0, ..LdsConfig::exact() })
            .map_err(|e| fail(e.to_string()))?;
        prop_assert!(exact.report.lds.abs() < 1e-9, "exact LDS {}", exact.report.lds);
        let cfg = LdsConfig {
            tau: -1.0,
            samples,
            ..LdsConfig::default()
        };
        let sampled = lds_sampled(&grid, &ContentBackend, &cache, &cfg).map_err(|e| fail(e.to_string()))?;
        for (&i, &v) in &sampled.report.dsp_per_target {
            let row = sampled.pairs.iter().filter(|p| p.i == i).count();
            if row > 1 || i == 2 {
                prop_assert!(v.abs() < 1e-9, "row {} dsp {}", i, v);
            }
        }
        Ok(())
    })
}

/// Random perplexity tables for an `n`-segment scripted grid.
fn scripted_doc() -> impl Strategy<Value = ScriptedBackend> {
    (2usize..9).prop_flat_map(|n| {
        (
            prop::collection::vec(5.0f64..200.0, n),
            prop::collection::vec(0.3f64..1.3, pair_count(n)),
        )
            .prop_map(move |(uncond, ratios)| {
                let mut b = ScriptedBackend::new(uncond.clone());
                let mut r = ratios.into_iter();
                for i in 2..=n {
                    for j in 1..i {
                        b.cond.insert((i, j), uncond[i - 1] * r.next().unwrap());
                    }
                }
                b
            })
    })
}

fn exact_lds(b: &ScriptedBackend, cfg: &LdsConfig) -> f64 {
    let grid = scripted_grid("d", b.uncond.len(), 1);
    lds_exact(&grid, b, &PplCache::new(), cfg).unwrap().report.lds
}

fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

pub fn ranking_invariance(cases: u32) -> Result<(), String> {
    let variant = prop_oneof![
        Just(DspVariant::Multiplicative),
        Just(DspVariant::Additive),
        Just(DspVariant::None)
    ];
    let strat = (prop::collection::vec(scripted_doc(), 2..6), 0.01f64..100.0, variant);
    run(cases, strat, |(docs, c, variant)| {
        let base = LdsConfig {
            dsp_variant: variant,
            gamma: 0.0,
            ..LdsConfig::exact()
        };
        let scaled = LdsConfig {
            alpha: c,
            beta: c,
            ..base.clone()
        };
        let a: Vec<f64> = docs.iter().map(|d| exact_lds(d, &base)).collect();
        let b: Vec<f64> = docs.iter().map(|d| exact_lds(d, &scaled)).collect();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x * c - y).abs() <= 1e-9 * (x * c).abs().max(1e-12), "{} * {} vs {}", x, c, y);
        }
        // Exact ties can split under rounding; only compare well-separated values.
        let separated = a
            .iter().enumerate().all(|(p, x)| {
                a.iter().enumerate().all(|(q, y)| p == q || (x - y).abs() > 1e-9 * x.abs().max(y.abs()))
            });
        if separated {
            prop_assert_eq!(argsort(&a), argsort(&b));
        }
        Ok(())
    })
}

pub fn exhaustive_equals_exact(cases: u32) -> Result<(), String> {
    let strat = (scripted_doc(), 0usize..50, any::<u64>(), -0.5f64..0.5);
    run(cases, strat, |(b, extra, seed, tau)| {
        let n = b.uncond.len();
        let grid = scripted_grid("d", n, 1);
        let cache = PplCache::new();
        let exact = lds_exact(&grid, &b, &cache, &LdsConfig { tau, ..LdsConfig::exact() }).unwrap();
        let cfg = LdsConfig {
            tau,
            samples: pair_count(n) + extra,
            seed,
            ..LdsConfig::default()
        };
        let sampled = lds_sampled(&grid, &b, &cache, &cfg).unwrap();
        prop_assert_eq!(sampled.report.lds.to_bits(), exact.report.lds.to_bits());
        prop_assert_eq!(&sampled.pairs, &exact.pairs);
        prop_assert_eq!(&sampled.report.dsp_per_target, &exact.report.dsp_per_target);
        Ok(())
    })
}

pub fn gate_semantics(cases: u32) -> Result<(), String> {
    run(cases, scripted_doc(), |b| {
        let grid = scripted_grid("d", b.uncond.len(), 1);
        let probe = lds_exact(&grid, &b, &PplCache::new(), &LdsConfig::exact()).unwrap();
        let max = probe.pairs.iter().map(|p| p.dst).fold(f64::MIN, f64::max);
        let cfg = LdsConfig {
            tau: max,
            ..LdsConfig::exact()
        };
        let gated = lds_exact(&grid, &b, &PplCache::new(), &cfg).unwrap();
        prop_assert_eq!(gated.report.lds, 0.0);
        prop_assert!(gated.pairs.iter().all(|p| !p.indicator));
        Ok(())
    })
}

fn report(id: String, source: String, lds: f64) -> ScoreReport {
    ScoreReport {
        doc_id: id,
        source,
        lds,
        mode: ScoreMode::Sampled,
        n_segments: 4,
        pairs_evaluated: 6,
        dsp_per_target: Default::default(),
        config_hash: "h".into(),
        config: LdsConfig::default(),
    }
}

pub fn selection_partition_and_means(cases: u32) -> Result<(), String> {
    let strat = (
        prop::collection::vec((0usize..3, -5.0f64..100.0), 1..60),
        0.01f64..=1.0,
        any::<bool>(),
        any::<u64>(),
        0usize..4,
    );
    run(cases, strat, |(docs, fraction, per_source, seed, n_dropped)| {
        let reports: Vec<ScoreReport> = docs
            .iter()
            .enumerate()
            .map(|(k, &(s, v))| report(format!("d{k:03}"), format!("src{s}"), v))
            .collect();
        let dropped: Vec<DroppedDoc> = (0..n_dropped)
            .map(|k| DroppedDoc {
                doc_id: format!("x{k}"),
                source: "src0".into(),
                reason: "short".into(),
            })
            .collect();
        let opts = SelectionOptions {
            strategy: SelStrategy::Prolong,
            fraction,
            per_source,
            seed,
            passthrough_sources: Vec::new(),
        };
        let m = select(&reports, &opts)
            .map_err(|e| fail(e.to_string()))?
            .with_dropped(dropped.clone(), Vec::new());
        let again = select(&reports, &opts).unwrap().with_dropped(dropped, Vec::new());
        prop_assert_eq!(m.to_json(), again.to_json());

        let retained: HashSet<&str> = m.retained_ids().collect();
        let rejected: HashSet<&str> = m.rejected_ids().collect();
        let excluded: HashSet<&str> = m.excluded.iter().map(|d| d.doc_id.as_str()).collect();
        prop_assert!(retained.is_disjoint(&rejected));
        prop_assert!(retained.is_disjoint(&excluded) && rejected.is_disjoint(&excluded));
        prop_assert_eq!(retained.len() + rejected.len(), reports.len());
        prop_assert_eq!(excluded.len(), n_dropped);
        for c in &m.comparison {
            prop_assert!(c.prolong_mean >= c.random_mean - 1e-9 * c.random_mean.abs());
            prop_assert!(c.prolong_mean >= c.full_mean - 1e-9 * c.full_mean.abs());
        }
        Ok(())
    })
}

fn pairs_for(n: usize, values: &[f64]) -> Vec<PairScore> {
    let mut v = values.iter().cycle();
    let mut out = Vec::new();
    for i in 2..=n {
        for j in 1..i {
            let dst = *v.next().unwrap();
            out.push(PairScore {
                i,
                j,
                delta_ppl: 0.0,
                dst,
                ddi: ddi(i, j, n),
                dsp: 1.0,
                indicator: dst > 0.05,
                lds_pair: dst,
            });
        }
    }
    out
}

pub fn csv_round_trip(cases: u32) -> Result<(), String> {
    let value = prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), -1.0f64..1.0];
    let strat = (2usize..12, prop::collection::vec(value, 1..20));
    run(cases, strat, |(n, values)| {
        let pairs = pairs_for(n, &values);
        let r = render_heatmap(&pairs, &HeatmapSpec::new("d", n)).map_err(|e| fail(e.to_string()))?;
        let rows = parse_csv(&r.csv).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(rows.len(), pairs.len());
        for (row, p) in rows.iter().zip(&pairs) {
            prop_assert_eq!((row.0, row.1), (p.i, p.j));
            prop_assert_eq!(row.2.to_bits(), p.dst.to_bits());
        }
        Ok(())
    })
}

pub fn image_shape_and_mask(cases: u32) -> Result<(), String> {
    let scale = prop_oneof![Just(ColorScale::Linear), Just(ColorScale::Diverging)];
    let strat = (2usize..16, 1usize..4, prop::collection::vec(-2.0f64..2.0, 1..10), scale, any::<u64>());
    run(cases, strat, |(n, cell, values, scale, drop_seed)| {
        let mut pairs = pairs_for(n, &values);
        // Drop some pairs to create masked lower-triangle cells too.
        if pairs.len() > 1 {
            let k = (drop_seed as usize) % pairs.len();
            pairs.remove(k);
        }
        let mut spec = HeatmapSpec::new("d", n);
        spec.cell_size = cell;
        spec.scale = scale;
        let r = render_heatmap(&pairs, &spec).map_err(|e| fail(e.to_string()))?;
        let side = n * cell;
        let header = format!("P6\n{side} {side}\n255\n");
        prop_assert!(r.ppm.starts_with(header.as_bytes()));
        let px = &r.ppm[header.len()..];
        prop_assert_eq!(px.len(), side * side * 3);
        let present: HashSet<(usize, usize)> = pairs.iter().map(|p| (p.i, p.j)).collect();
        for i in 1..=n {
            for j in 1..=n {
                let at = ((i - 1) * cell * side + (j - 1) * cell) * 3;
                let rgb = [px[at], px[at + 1], px[at + 2]];
                if present.contains(&(i, j)) {
                    prop_assert_ne!(rgb, MASK_RGB);
                } else {
                    prop_assert_eq!(rgb, MASK_RGB);
                }
            }
        }
        Ok(())
    })
}

pub fn accuracy_order_invariance(cases: u32) -> Result<(), String> {
    let strat = prop::collection::vec((0.0f64..10.0, any::<bool>()), 1..80)
        .prop_flat_map(|docs| (Just(docs.clone()), Just(docs).prop_shuffle()));
    run(cases, strat, |(docs, shuffled)| {
        let label = |v: &[(f64, bool)]| -> Vec<(String, f64, bool)> {
            v.iter().map(|&(s, l)| (format!("{s:.17}-{l}"), s, l)).collect()
        };
        let k = docs.iter().filter(|d| d.1).count();
        let a = accuracy_at_k(&label(&docs), k);
        let b = accuracy_at_k(&label(&shuffled), k);
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
        Ok(())
    })
}
