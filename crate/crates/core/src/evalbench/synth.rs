//! Synthetic documents with planted (or deliberately absent) long-range structure.
//!
//! All text is drawn from a [`Language`]: a fixed vocabulary of lowercase
//! pseudo-words with a sparse first-order transition table. Long-range
//! dependencies come from capitalized entity names that are invented per
//! document, so a scorer trained on background text from the same language
//! has never seen them and can only predict them from context.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Function words used by the templates. They are part of the vocabulary so
/// background text teaches the scorer where entity slots are.
const TEMPLATE_WORDS: &[&str] = &[".", "the", "code", "of", "is", "so", "met", "and", "said", "to"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Facts stated early ("the code of X is Y .") and recalled late ("so X is Y .").
    KeyReference,
    /// A fixed cast of entities mentioned throughout the document.
    EntityChain,
    /// Short independent pieces, each with its own cast.
    ShortConcat,
    /// Background text only.
    LocalOnly,
    /// Pieces of the same lengths as [`ShortConcat`](Self::ShortConcat), but
    /// all drawing their cast from one document-wide pool.
    StructuredConcat,
    /// One token repeated for the whole document.
    RepeatedToken,
}

impl std::str::FromStr for Generator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "key-reference" => Ok(Self::KeyReference),
            "entity-chain" => Ok(Self::EntityChain),
            "short-concat" => Ok(Self::ShortConcat),
            "local-only" => Ok(Self::LocalOnly),
            "structured-concat" => Ok(Self::StructuredConcat),
            "repeated-token" => Ok(Self::RepeatedToken),
            _ => Err(format!("unknown generator {s:?}")),
        }
    }
}

/// Vocabulary plus a sparse Markov transition table.
#[derive(Clone, Debug)]
pub struct Language {
    words: Vec<String>,
    /// Candidate successors of each word, most likely first.
    successors: Vec<Vec<usize>>,
    /// Cumulative Zipf weights shared by every successor list.
    cumulative: Vec<f64>,
}

fn syllable(rng: &mut impl Rng, out: &mut String) {
    out.push(*CONSONANTS.choose(rng).unwrap() as char);
    out.push(*VOWELS.choose(rng).unwrap() as char);
}

impl Language {
    pub const DEFAULT_SEED: u64 = 0x5eed_1a46;

    pub fn new(seed: u64, vocab_size: usize, branching: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = words.iter().cloned().collect();
        while words.len() < vocab_size.max(TEMPLATE_WORDS.len() + 1) {
            let mut w = String::new();
            for _ in 0..rng.random_range(1..=3) {
                syllable(&mut rng, &mut w);
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let branching = branching.clamp(1, words.len());
        let successors = (0..words.len())
            .map(|_| {
                rand::seq::index::sample(&mut rng, words.len(), branching)
                    .into_iter()
                    .collect()
            })
            .collect();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = (0..branching)
            .map(|r| {
                acc += 1.0 / (r as f64 + 1.0);
                acc
            })
            .collect();
        for c in &mut cumulative {
            *c /= acc;
        }
        Self {
            words,
            successors,
            cumulative,
        }
    }

    pub fn standard() -> Self {
        Self::new(Self::DEFAULT_SEED, 2000, 12)
    }

    pub fn vocab(&self) -> &[String] {
        &self.words
    }

    /// Appends `n` words of background text.
    pub fn babble(&self, rng: &mut impl Rng, n: usize, out: &mut Vec<String>) {
        let mut cur = rng.random_range(0..self.words.len());
        for step in 0..n {
            if step > 0 && rng.random_bool(0.08) {
                out.push(".".to_string());
                cur = rng.random_range(0..self.words.len());
                continue;
            }
            out.push(self.words[cur].clone());
            cur = if rng.random_bool(0.9) {
                let u: f64 = rng.random();
                let r = self.cumulative.partition_point(|&c| c < u).min(self.cumulative.len() - 1);
                self.successors[cur][r]
            } else {
                rng.random_range(0..self.words.len())
            };
        }
    }

    /// Background documents for training a scorer. Template sentences are
    /// included with entity names that never occur in generated test sets.
    pub fn background(&self, n_docs: usize, tokens_each: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb4c6_0000);
        let names: Vec<String> = cast(&mut rng, 200).into_iter().map(|n| format!("Bg{n}")).collect();
        (0..n_docs)
            .map(|_| {
                let mut out = Vec::with_capacity(tokens_each + 16);
                while out.len() < tokens_each {
                    let n = rng.random_range(10..30);
                    self.babble(&mut rng, n, &mut out);
                    let e = names.choose(&mut rng).unwrap();
                    let v = names.choose(&mut rng).unwrap();
                    match rng.random_range(0..3) {
                        0 => push_all(&mut out, &["the", "code", "of", e, "is", v, "."]),
                        1 => push_all(&mut out, &["so", e, "is", v, "."]),
                        _ => push_all(&mut out, &[e, "met", v, "."]),
                    }
                }
                out.truncate(tokens_each);
                out.join(" ")
            })
            .collect()
    }
}

fn push_all(out: &mut Vec<String>, words: &[&str]) {
    out.extend(words.iter().map(|w| w.to_string()));
}

fn entity_name(rng: &mut impl Rng) -> String {
    let mut w = String::new();
    for _ in 0..3 {
        syllable(rng, &mut w);
    }
    let mut cs = w.chars();
    let first = cs.next().unwrap().to_ascii_uppercase();
    format!("{first}{}{}", cs.as_str(), rng.random_range(10..100))
}

fn cast(rng: &mut impl Rng, n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let e = entity_name(rng);
        if !out.contains(&e) {
            out.push(e);
        }
    }
    out
}

/// Background text with a cast member mentioned every few words.
fn chain_text(lang: &Language, rng: &mut impl Rng, cast: &[String], n: usize, out: &mut Vec<String>) {
    let end = out.len() + n;
    while out.len() < end {
        let gap = rng.random_range(5..12);
        lang.babble(rng, gap, out);
        let a = cast.choose(rng).unwrap();
        if cast.len() > 1 && rng.random_bool(0.3) {
            let b = cast.choose(rng).unwrap();
            push_all(out, &[a, "met", b]);
        } else {
            out.push(a.clone());
        }
    }
    out.truncate(end);
}

/// Piece lengths in `[segment_len / 2, 2 * segment_len]` that sum to `len`.
fn piece_lengths(rng: &mut impl Rng, len: usize, segment_len: usize) -> Vec<usize> {
    let lo = (segment_len / 2).max(1);
    let hi = (segment_len * 2).max(lo + 1);
    let mut out = Vec::new();
    let mut left = len;
    while left > 0 {
        let n = rng.random_range(lo..=hi).min(left);
        out.push(n);
        left -= n;
    }
    out
}

/// Generates one document of exactly `len` whitespace tokens.
pub fn generate(gen: Generator, lang: &Language, len: usize, segment_len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<String> = Vec::with_capacity(len + 16);
    match gen {
        Generator::KeyReference => {
            let n_facts = (len / 200).max(4);
            let keys = cast(&mut rng, n_facts);
            let values = cast(&mut rng, n_facts);
            let fact_zone = len / 4;
            let spacing = (fact_zone / n_facts).max(8);
            for (k, v) in keys.iter().zip(&values) {
                let n = spacing.saturating_sub(7).max(1);
                lang.babble(&mut rng, n, &mut out);
                push_all(&mut out, &["the", "code", "of", k, "is", v, "."]);
            }
            while out.len() < len {
                let n = rng.random_range(15..30);
                lang.babble(&mut rng, n, &mut out);
                let f = rng.random_range(0..n_facts);
                push_all(&mut out, &["so", &keys[f], "is", &values[f], "."]);
            }
        }
        Generator::EntityChain => {
            let c = cast(&mut rng, 10);
            chain_text(lang, &mut rng, &c, len, &mut out);
        }
        Generator::ShortConcat => {
            for n in piece_lengths(&mut rng, len, segment_len) {
                let c = cast(&mut rng, 3);
                chain_text(lang, &mut rng, &c, n, &mut out);
            }
        }
        Generator::StructuredConcat => {
            let pool = cast(&mut rng, 12);
            for n in piece_lengths(&mut rng, len, segment_len) {
                let c: Vec<String> = pool.choose_multiple(&mut rng, 3).cloned().collect();
                chain_text(lang, &mut rng, &c, n, &mut out);
            }
        }
        Generator::LocalOnly => lang.babble(&mut rng, len, &mut out),
        Generator::RepeatedToken => out.resize(len, "=".to_string()),
    }
    out.truncate(len);
    out.join(" ")
}

/// Like [`Generator::StructuredConcat`], but each piece draws its cast from
/// the shared pool only with probability `relatedness`, otherwise from fresh
/// names. Sweeping `relatedness` gives a continuum of dependency strength.
pub fn generate_mixed(lang: &Language, len: usize, segment_len: usize, relatedness: f64, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = cast(&mut rng, 12);
    let mut out: Vec<String> = Vec::with_capacity(len + 16);
    for n in piece_lengths(&mut rng, len, segment_len) {
        let c: Vec<String> = if rng.random_bool(relatedness.clamp(0.0, 1.0)) {
            pool.choose_multiple(&mut rng, 3).cloned().collect()
        } else {
            cast(&mut rng, 3)
        };
        chain_text(lang, &mut rng, &c, n, &mut out);
    }
    out.truncate(len);
    out.join(" ")
}
