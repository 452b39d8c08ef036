use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of ordered segment pairs `j < i` among `n` segments.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Distinct segment pairs `(x, y)`, `x < y`, 1-based, sorted by `(y, x)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledPairSet {
    pub n: usize,
    pub seed: u64,
    pub pairs: Vec<(usize, usize)>,
}

impl SampledPairSet {
    pub fn is_exhaustive(&self) -> bool {
        self.pairs.len() == pair_count(self.n)
    }
}

/// Position of pair `(j, i)` in the `(i, j)`-ordered enumeration of all pairs.
#[cfg(test)]
fn linear_index(j: usize, i: usize) -> usize {
    (i - 1) * (i - 2) / 2 + (j - 1)
}

fn pair_at(k: usize) -> (usize, usize) {
    // Largest r with r(r+1)/2 <= k, then i = r + 2.
    let mut r = (((8 * k + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    while (r + 1) * (r + 2) / 2 <= k {
        r += 1;
    }
    while r * (r + 1) / 2 > k {
        r -= 1;
    }
    let i = r + 2;
    let j = k - r * (r + 1) / 2 + 1;
    (j, i)
}

/// Uniform sample of `min(t, N(N-1)/2)` distinct pairs, deterministic in `seed`.
pub fn sample_pairs(n: usize, t: usize, seed: u64) -> SampledPairSet {
    assert!(n >= 2, "need at least two segments");
    assert!(t >= 1, "need at least one sample");
    let total = pair_count(n);
    let mut pairs: Vec<(usize, usize)> = if t >= total {
        (0..total).map(pair_at).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, total, t).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(pair_at).collect()
    };
    pairs.sort_unstable_by_key(|&(x, y)| (y, x));
    SampledPairSet { n, seed, pairs }
}
