//! Rank statistics used by the benchmark and the acceptance checks.

use statrs::distribution::{ContinuousCDF, DiscreteCDF, Hypergeometric, Normal};

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return if sxx == syy { 1.0 } else { 0.0 };
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    if x.len() < 2 {
        return 1.0;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankSum {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    pub z: f64,
    /// One-sided p-value for "first sample tends to be larger".
    pub p_greater: f64,
}

/// Wilcoxon rank-sum / Mann-Whitney U test, normal approximation with tie
/// and continuity corrections.
pub fn rank_sum(x: &[f64], y: &[f64]) -> RankSum {
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let all: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = average_ranks(&all);
    let r1: f64 = ranks[..x.len()].iter().sum();
    let u = r1 - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let mean = n1 * n2 / 2.0;
    let z = if var > 0.0 { (u - mean - 0.5) / var.sqrt() } else { 0.0 };
    let normal = Normal::standard();
    RankSum {
        u,
        z,
        p_greater: normal.sf(z),
    }
}

/// P(at least `hits` positives in the top `k`) when `n` documents, `positives`
/// of them positive, are ranked uniformly at random.
pub fn top_k_p_value(n: u64, positives: u64, k: u64, hits: u64) -> f64 {
    if hits == 0 {
        return 1.0;
    }
    let dist = Hypergeometric::new(n, positives, k).expect("valid hypergeometric parameters");
    dist.sf(hits - 1)
}
