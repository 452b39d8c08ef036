use std::hash::Hasher;

use fnv::FnvHasher;
use sha2::{Digest, Sha256};

/// Stable 64-bit FNV-1a hash of a byte string.
pub(crate) fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub(crate) fn hash_tokens(tokens: &[u64]) -> u64 {
    let mut h = FnvHasher::default();
    for t in tokens {
        h.write_u64(*t);
    }
    h.write_usize(tokens.len());
    h.finish()
}

/// Lower-case hex SHA-256, truncated to `len` characters.
pub(crate) fn sha256_hex(bytes: &[u8], len: usize) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        out.push_str(&format!("{b:02x}"));
    }
    out.truncate(len);
    out
}

pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}
