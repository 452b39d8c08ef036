//! Run configuration shared by every subcommand.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenizerKind;
use crate::lds::LdsConfig;
use crate::scorer::ngram::DEFAULT_CACHE_WEIGHT;
use crate::util::sha256_hex;

/// Name of the built-in default profile.
pub const DEFAULT_PROFILE: &str = "standard";

pub const DEFAULT_SEGMENT_LEN: usize = 128;
pub const DEFAULT_MAX_TOKENS: usize = 32768;
pub const DEFAULT_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendSpec {
    Ngram {
        model: PathBuf,
        #[serde(default = "default_cache_weight")]
        cache_weight: f64,
    },
    External {
        endpoint: String,
        #[serde(default = "default_max_context")]
        max_context_tokens: usize,
        #[serde(default)]
        context_separator: String,
        #[serde(default = "default_connections")]
        max_connections: usize,
    },
}

fn default_cache_weight() -> f64 {
    DEFAULT_CACHE_WEIGHT
}

fn default_max_context() -> usize {
    4096
}

fn default_connections() -> usize {
    4
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Ngram {
            model: PathBuf::from("model.ngram"),
            cache_weight: DEFAULT_CACHE_WEIGHT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub profile: String,
    pub lds: LdsConfig,
    pub tokenizer: TokenizerKind,
    pub segment_len: usize,
    pub max_tokens: usize,
    pub workers: usize,
    pub fraction: f64,
    pub backend: BackendSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            profile: DEFAULT_PROFILE.to_string(),
            lds: LdsConfig::default(),
            tokenizer: TokenizerKind::Whitespace,
            segment_len: DEFAULT_SEGMENT_LEN,
            max_tokens: DEFAULT_MAX_TOKENS,
            workers: 1,
            fraction: DEFAULT_FRACTION,
            backend: BackendSpec::default(),
        }
    }
}

#[derive(Serialize)]
struct HashedFields<'a> {
    lds: &'a LdsConfig,
    tokenizer: TokenizerKind,
    segment_len: usize,
    max_tokens: usize,
    backend: &'a str,
}

impl RunConfig {
    /// Hash over everything that changes scores. `backend` is the live
    /// backend's description, so a model is identified by content rather
    /// than by path. Worker count does not change results and is excluded.
    pub fn hash(&self, backend: &str) -> String {
        let fields = HashedFields {
            lds: &self.lds,
            tokenizer: self.tokenizer,
            segment_len: self.segment_len,
            max_tokens: self.max_tokens,
            backend,
        };
        sha256_hex(&serde_json::to_vec(&fields).expect("config serializes"), 16)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
