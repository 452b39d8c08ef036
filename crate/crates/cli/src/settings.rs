//! Effective configuration: built-in defaults, then a config file, then flags.

use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;

use lds_core::config::{BackendSpec, RunConfig};
use lds_core::lds::{DspVariant, ScoreMode};
use lds_core::TokenizerKind;

use crate::{CliError, CliResult};

pub const ENDPOINT_ENV: &str = "LDS_SCORER_ENDPOINT";

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    pub show_config: bool,

    /// Tokens per segment (L).
    #[arg(long, global = true)]
    pub segment_len: Option<usize>,

    /// Truncation length in tokens (M).
    #[arg(long, global = true)]
    pub max_tokens: Option<usize>,

    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// exact or sampled.
    #[arg(long, global = true)]
    pub mode: Option<ScoreMode>,

    /// Number of sampled segment pairs (T).
    #[arg(long, global = true)]
    pub samples: Option<usize>,

    #[arg(long, global = true)]
    pub alpha: Option<f64>,

    #[arg(long, global = true)]
    pub beta: Option<f64>,

    /// Weight of DSP under the additive variant.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,

    /// Pairs with dependency strength at or below tau are not accumulated.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub tau: Option<f64>,

    /// Seed for pair sampling and random selection.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// multiplicative, additive or none.
    #[arg(long, global = true)]
    pub dsp_variant: Option<DspVariant>,

    /// Fraction of each group to retain.
    #[arg(long, global = true)]
    pub fraction: Option<f64>,

    /// whitespace or byte.
    #[arg(long, global = true)]
    pub tokenizer: Option<TokenizerKind>,

    /// Built-in n-gram model file.
    #[arg(long, global = true, value_name = "FILE", conflicts_with = "endpoint")]
    pub model: Option<PathBuf>,

    /// Weight of the in-context cache of the n-gram backend.
    #[arg(long, global = true)]
    pub cache_weight: Option<f64>,

    /// External scorer, tcp://host:port or cmd:<program>.
    #[arg(long, global = true, env = ENDPOINT_ENV)]
    pub endpoint: Option<String>,

    /// Context window of the external scorer, in pipeline tokens.
    #[arg(long, global = true)]
    pub max_context_tokens: Option<usize>,
}

pub fn load(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(CliError::validation)?;
            serde_json::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .map_err(CliError::validation)?
        }
        None => RunConfig::default(),
    };
    set(&mut cfg.segment_len, args.segment_len);
    set(&mut cfg.max_tokens, args.max_tokens);
    set(&mut cfg.workers, args.workers);
    set(&mut cfg.fraction, args.fraction);
    set(&mut cfg.tokenizer, args.tokenizer);
    let lds = &mut cfg.lds;
    set(&mut lds.mode, args.mode);
    set(&mut lds.samples, args.samples);
    set(&mut lds.alpha, args.alpha);
    set(&mut lds.beta, args.beta);
    set(&mut lds.gamma, args.gamma);
    set(&mut lds.tau, args.tau);
    set(&mut lds.seed, args.seed);
    set(&mut lds.dsp_variant, args.dsp_variant);

    if let Some(endpoint) = &args.endpoint {
        cfg.backend = BackendSpec::External {
            endpoint: endpoint.clone(),
            max_context_tokens: 4096,
            context_separator: String::new(),
            max_connections: 4,
        };
    } else if let Some(model) = &args.model {
        let cache_weight = match &cfg.backend {
            BackendSpec::Ngram { cache_weight, .. } => *cache_weight,
            _ => lds_core::scorer::ngram::DEFAULT_CACHE_WEIGHT,
        };
        cfg.backend = BackendSpec::Ngram {
            model: model.clone(),
            cache_weight,
        };
    }
    match &mut cfg.backend {
        BackendSpec::Ngram { cache_weight, .. } => set(cache_weight, args.cache_weight),
        BackendSpec::External {
            max_context_tokens, ..
        } => set(max_context_tokens, args.max_context_tokens),
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn set<T: Clone>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn validate(cfg: &RunConfig) -> CliResult {
    cfg.lds.validate().map_err(CliError::validation)?;
    let bad = |msg: String| Err(CliError::validation(anyhow!(msg)));
    if cfg.segment_len == 0 {
        return bad("segment_len must be positive".into());
    }
    if cfg.max_tokens < 2 * cfg.segment_len {
        return bad(format!(
            "max_tokens ({}) must be at least twice segment_len ({})",
            cfg.max_tokens, cfg.segment_len
        ));
    }
    if cfg.workers == 0 {
        return bad("workers must be at least 1".into());
    }
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return bad(format!("fraction must be in (0, 1], got {}", cfg.fraction));
    }
    if let BackendSpec::Ngram { cache_weight, .. } = cfg.backend {
        if !(0.0..1.0).contains(&cache_weight) {
            return bad(format!("cache_weight must be in [0, 1), got {cache_weight}"));
        }
    }
    Ok(())
}
