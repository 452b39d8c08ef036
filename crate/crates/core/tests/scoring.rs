mod support;

use lds_core::lds::{ddi, dsp, lds_exact, lds_sampled, score_grid};
use lds_core::scorer::{CountingBackend, PplCache};
use lds_core::{LdsConfig, ScoreMode};

use support::{scripted_grid, ContentBackend, ScriptedBackend};

fn three_segment_script() -> ScriptedBackend {
    ScriptedBackend::new(vec![30.0, 20.0, 40.0])
        .with(2, 1, 15.0)
        .with(3, 1, 25.0)
        .with(3, 2, 37.0)
}

#[test]
fn three_segments_match_a_hand_expanded_sum() {
    let grid = scripted_grid("toy", 3, 4);
    let cfg = LdsConfig::exact();
    let s = lds_exact(&grid, &three_segment_script(), &PplCache::new(), &cfg).unwrap();

    // Row i=2 has a single candidate, row i=3 has two.
    let dst21 = (20.0 - 15.0) / 20.0;
    let dst31 = (40.0 - 25.0) / 40.0;
    let dst32 = (40.0 - 37.0) / 40.0;
    let dsp2 = dsp(&[5.0]);
    let dsp3 = dsp(&[15.0, 3.0]);
    let mut expect = 0.0;
    for (dst, i, j, d) in [(dst21, 2, 1, dsp2), (dst31, 3, 1, dsp3), (dst32, 3, 2, dsp3)] {
        if dst > cfg.tau {
            expect += (dst + ddi(i, j, 3)) * d;
        }
    }
    assert!((s.report.lds - expect).abs() < 1e-12, "{} vs {expect}", s.report.lds);
    assert_eq!(s.report.pairs_evaluated, 3);
    assert_eq!(s.pairs.len(), 3);
    assert!(s.pairs.iter().all(|p| p.indicator == (p.dst > cfg.tau)));
}

#[test]
fn nothing_above_tau_scores_zero() {
    let grid = scripted_grid("flat", 3, 4);
    let backend = ScriptedBackend::new(vec![30.0, 20.0, 40.0])
        .with(2, 1, 19.5)
        .with(3, 1, 39.0)
        .with(3, 2, 41.0);
    let s = lds_exact(&grid, &backend, &PplCache::new(), &LdsConfig::exact()).unwrap();
    assert_eq!(s.report.lds, 0.0);
    assert!(s.pairs.iter().all(|p| !p.indicator));
}

#[test]
fn a_missing_perplexity_fails_the_document() {
    let grid = scripted_grid("gap", 3, 4);
    let backend = ScriptedBackend::new(vec![30.0, 20.0, 40.0]).with(2, 1, 15.0);
    assert!(lds_exact(&grid, &backend, &PplCache::new(), &LdsConfig::exact()).is_err());
}

#[test]
fn modes_must_match_the_entry_point() {
    let grid = scripted_grid("m", 3, 4);
    let backend = three_segment_script();
    assert!(lds_sampled(&grid, &backend, &PplCache::new(), &LdsConfig::exact()).is_err());
    assert!(lds_exact(&grid, &backend, &PplCache::new(), &LdsConfig::default()).is_err());
}

#[test]
fn small_grid_with_large_t_is_exhausted() {
    let grid = scripted_grid("small", 3, 4);
    let cfg = LdsConfig {
        samples: 10,
        ..LdsConfig::default()
    };
    let sampled = lds_sampled(&grid, &three_segment_script(), &PplCache::new(), &cfg).unwrap();
    let exact = lds_exact(&grid, &three_segment_script(), &PplCache::new(), &LdsConfig::exact()).unwrap();
    assert_eq!(sampled.report.pairs_evaluated, 3);
    assert_eq!(sampled.report.lds.to_bits(), exact.report.lds.to_bits());
}

#[test]
fn full_grid_calls_the_backend_once_per_segment_and_pair() {
    let grid = scripted_grid("big", 256, 2);
    let backend = CountingBackend::new(ContentBackend);
    let cache = PplCache::new();
    let cfg = LdsConfig::default();
    assert_eq!(cfg.mode, ScoreMode::Sampled);
    let s = score_grid(&grid, &backend, &cache, &cfg).unwrap();
    assert_eq!(s.report.n_segments, 256);
    assert_eq!(s.report.pairs_evaluated, 5000);
    assert_eq!(backend.unconditional_calls(), 256);
    assert_eq!(backend.conditional_calls(), 5000);

    // Unconditional perplexities are cached; a second pass only needs the pairs.
    backend.reset();
    let again = score_grid(&grid, &backend, &cache, &cfg).unwrap();
    assert_eq!(backend.unconditional_calls(), 0);
    assert_eq!(again.report.lds.to_bits(), s.report.lds.to_bits());
}

#[test]
fn unconditional_calls_do_not_depend_on_t() {
    let grid = scripted_grid("t", 64, 2);
    for t in [1, 50, 2016, 9999] {
        let backend = CountingBackend::new(ContentBackend);
        let cfg = LdsConfig {
            samples: t,
            ..LdsConfig::default()
        };
        let s = score_grid(&grid, &backend, &PplCache::new(), &cfg).unwrap();
        assert_eq!(backend.unconditional_calls(), 64);
        assert_eq!(s.report.pairs_evaluated, t.min(64 * 63 / 2));
    }
}

#[test]
fn report_records_row_specificity_for_evaluated_targets() {
    let grid = scripted_grid("rows", 3, 4);
    let s = lds_exact(&grid, &three_segment_script(), &PplCache::new(), &LdsConfig::exact()).unwrap();
    let rows: Vec<usize> = s.report.dsp_per_target.keys().copied().collect();
    assert_eq!(rows, [2, 3]);
    assert_eq!(s.report.dsp_per_target[&3], dsp(&[15.0, 3.0]));
}
