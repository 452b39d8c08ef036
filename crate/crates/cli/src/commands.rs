use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use lds_core::config::{BackendSpec, RunConfig};
use lds_core::corpus::{ingest, InputFormat};
use lds_core::evalbench::{self, Generator, Language, OracleBackend, SynthSpec};
use lds_core::pipeline::{
    score_corpus, select as select_reports, DocOutcome, DroppedDoc, PipelineConfig, SelectionOptions, Strategy,
};
use lds_core::scorer::external::{Endpoint, ExternalBackend, ExternalConfig};
use lds_core::scorer::ngram::{NGramBackend, NGramModel, DEFAULT_CACHE_WEIGHT, DEFAULT_K, DEFAULT_ORDER};
use lds_core::viz::{render_heatmap, ColorScale, HeatValue, HeatmapSpec};
use lds_core::{PairScore, PerplexityBackend, ScoreReport, TokenizerSpec};

use crate::{exit, CliError, CliResult};

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const SCORE_MANIFEST_FILE: &str = "score_manifest.json";
pub const RUN_META_FILE: &str = "run_meta.json";

fn tokenizer(cfg: &RunConfig) -> TokenizerSpec {
    TokenizerSpec {
        kind: cfg.tokenizer,
        vocabulary: None,
    }
}

fn open_corpus(input: &Path, format: InputFormat) -> CliResult<lds_core::corpus::DocumentStream> {
    ingest(input, format).map_err(CliError::validation)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

// ---------------------------------------------------------------- train-ngram

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: InputFormat,
    /// N-gram order, 1 to 5.
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    pub order: usize,
    /// Add-k smoothing constant.
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: f64,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train(cfg: &RunConfig, args: TrainArgs) -> CliResult<u8> {
    if args.order == 0 || args.order > lds_core::scorer::ngram::MAX_ORDER {
        return Err(CliError::validation(anyhow!(
            "--order must be in 1..={}, got {}",
            lds_core::scorer::ngram::MAX_ORDER,
            args.order
        )));
    }
    if !(args.k.is_finite() && args.k > 0.0) {
        return Err(CliError::validation(anyhow!("--k must be finite and > 0, got {}", args.k)));
    }
    let tok = tokenizer(cfg);
    let docs = open_corpus(&args.input, args.format)?;
    let seqs: Vec<Vec<u64>> = docs.map(|d| tok.token_ids(&d.text)).collect();
    let model = NGramModel::train(&seqs, args.order, args.k).map_err(CliError::validation)?;
    model
        .save(&args.out)
        .with_context(|| format!("writing model {}", args.out.display()))?;
    eprintln!(
        "trained order-{} model on {} documents, {} types -> {} ({})",
        args.order,
        seqs.len(),
        model.vocab_size(),
        args.out.display(),
        model.fingerprint()
    );
    Ok(exit::OK)
}

// ---------------------------------------------------------------- score

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Corpus to score.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "jsonl")]
    pub format: InputFormat,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every pair score to pairs.jsonl (needed by `heatmap`).
    #[arg(long)]
    pub emit_pairs: bool,
}

/// One line of the pair sidecar.
#[derive(Debug, Serialize, Deserialize)]
pub struct PairsRecord {
    pub doc_id: String,
    pub n_segments: usize,
    pub config_hash: String,
    pub pairs: Vec<PairScore>,
}

/// Deterministic summary of a scoring run.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreManifest {
    pub config_hash: String,
    pub backend: String,
    pub config: RunConfig,
    pub token_units: String,
    pub complete: bool,
    pub scored: usize,
    pub skipped_records: usize,
    pub excluded: Vec<DroppedDoc>,
    pub failed: Vec<DroppedDoc>,
}

fn build_backend(cfg: &RunConfig) -> CliResult<Arc<dyn PerplexityBackend>> {
    match &cfg.backend {
        BackendSpec::Ngram { model, cache_weight } => {
            let m = NGramModel::load(model)
                .with_context(|| {
                    format!(
                        "loading n-gram model {} (train one with `lds train-ngram`, or pass --endpoint)",
                        model.display()
                    )
                })
                .map_err(CliError::validation)?;
            Ok(Arc::new(NGramBackend::with_cache_weight(Arc::new(m), *cache_weight)))
        }
        BackendSpec::External {
            endpoint,
            max_context_tokens,
            context_separator,
            max_connections,
        } => Ok(Arc::new(connect_external(
            endpoint,
            *max_context_tokens,
            context_separator,
            *max_connections,
        )?)),
    }
}

fn connect_external(
    endpoint: &str,
    max_context_tokens: usize,
    separator: &str,
    max_connections: usize,
) -> CliResult<ExternalBackend> {
    let ep: Endpoint = endpoint.parse().map_err(CliError::validation)?;
    let mut ecfg = ExternalConfig::new(ep);
    ecfg.max_context_tokens = max_context_tokens;
    ecfg.context_separator = separator.to_string();
    ecfg.max_connections = max_connections;
    ExternalBackend::connect(ecfg).map_err(CliError::unreachable)
}

fn pipeline_config(cfg: &RunConfig, backend: &dyn PerplexityBackend) -> PipelineConfig {
    let mut p = PipelineConfig::new(cfg.lds.clone(), cfg.segment_len, cfg.max_tokens);
    p.tokenizer = tokenizer(cfg);
    p.workers = cfg.workers;
    p.config_hash = cfg.hash(&backend.describe());
    p
}

pub fn score(cfg: RunConfig, args: ScoreArgs) -> CliResult<u8> {
    // Everything that can fail up front happens before the output directory exists.
    let docs = open_corpus(&args.input, args.format)?;
    let ingest_stats = docs.stats_handle();
    let backend = build_backend(&cfg)?;
    let pcfg = pipeline_config(&cfg, backend.as_ref());

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let create = |name: &str| -> anyhow::Result<BufWriter<File>> {
        let path = args.out.join(name);
        Ok(BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        ))
    };
    let mut reports = create(REPORTS_FILE)?;
    let mut pairs = if args.emit_pairs {
        Some(create(PAIRS_FILE)?)
    } else {
        let stale = args.out.join(PAIRS_FILE);
        if stale.exists() {
            std::fs::remove_file(&stale).with_context(|| format!("removing stale {}", stale.display()))?;
        }
        None
    };

    let cancel = Arc::new(AtomicBool::new(false));
    {
        let cancel = cancel.clone();
        if let Err(e) = ctrlc::set_handler(move || cancel.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install interrupt handler: {e}");
        }
    }

    let mut excluded = Vec::new();
    let mut failed = Vec::new();
    let mut write_err: Option<anyhow::Error> = None;
    let stats = score_corpus(docs, backend.as_ref(), &pcfg, Some(&cancel), |outcome| {
        if write_err.is_some() {
            return;
        }
        let res = (|| -> anyhow::Result<()> {
            match outcome {
                DocOutcome::Scored(s) => {
                    serde_json::to_writer(&mut reports, &s.report)?;
                    reports.write_all(b"\n")?;
                    if let Some(w) = pairs.as_mut() {
                        let rec = PairsRecord {
                            doc_id: s.report.doc_id,
                            n_segments: s.report.n_segments,
                            config_hash: s.report.config_hash,
                            pairs: s.pairs,
                        };
                        serde_json::to_writer(&mut *w, &rec)?;
                        w.write_all(b"\n")?;
                    }
                }
                DocOutcome::Excluded(d) => excluded.push(d),
                DocOutcome::Failed(d) => failed.push(d),
            }
            Ok(())
        })();
        if let Err(e) = res {
            write_err = Some(e);
        }
    })
    .map_err(CliError::validation)?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    reports.flush()?;
    if let Some(w) = pairs.as_mut() {
        w.flush()?;
    }

    let manifest = ScoreManifest {
        config_hash: pcfg.config_hash.clone(),
        backend: backend.describe(),
        config: cfg,
        token_units: "pipeline-tokenizer".into(),
        complete: stats.complete,
        scored: stats.scored,
        skipped_records: ingest_stats.get().skipped(),
        excluded,
        failed,
    };
    write_json(&args.out.join(SCORE_MANIFEST_FILE), &manifest)?;
    write_json(
        &args.out.join(RUN_META_FILE),
        &serde_json::json!({
            "config_hash": pcfg.config_hash,
            "finished_unix_secs": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            "elapsed_secs": stats.elapsed_secs,
            "docs_per_second": stats.docs_per_second,
        }),
    )?;

    eprintln!(
        "scored {} documents ({} excluded, {} failed) in {:.1}s -> {}",
        stats.scored,
        manifest.excluded.len(),
        manifest.failed.len(),
        stats.elapsed_secs,
        args.out.display()
    );
    if !stats.complete {
        eprintln!("interrupted: outputs are partial and the manifest is marked incomplete");
        return Ok(exit::PARTIAL);
    }
    if !manifest.failed.is_empty() {
        return Ok(exit::PARTIAL);
    }
    Ok(exit::OK)
}

// ---------------------------------------------------------------- select

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// reports.jsonl, or a score output directory.
    #[arg(long)]
    pub reports: PathBuf,
    /// Directory for manifest.json and retained_ids.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// prolong, random or full.
    #[arg(long, default_value = "prolong")]
    pub strategy: Strategy,
    /// Rank all documents together instead of per source.
    #[arg(long)]
    pub global: bool,
    /// Source kept in full regardless of strategy; repeatable.
    #[arg(long = "passthrough", value_name = "SOURCE")]
    pub passthrough: Vec<String>,
}

fn read_reports(path: &Path) -> anyhow::Result<Vec<ScoreReport>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).with_context(|| format!("{}:{}: bad report", path.display(), n + 1))?,
        );
    }
    Ok(out)
}

pub fn select(cfg: &RunConfig, args: SelectArgs) -> CliResult<u8> {
    let (reports_path, run_dir) = if args.reports.is_dir() {
        (args.reports.join(REPORTS_FILE), Some(args.reports.clone()))
    } else {
        (args.reports.clone(), args.reports.parent().map(Path::to_path_buf))
    };
    let reports = read_reports(&reports_path).map_err(CliError::validation)?;
    let opts = SelectionOptions {
        strategy: args.strategy,
        fraction: cfg.fraction,
        per_source: !args.global,
        seed: cfg.lds.seed,
        passthrough_sources: args.passthrough,
    };
    let mut manifest = select_reports(&reports, &opts).map_err(CliError::validation)?;

    let score_manifest = run_dir
        .map(|d| d.join(SCORE_MANIFEST_FILE))
        .filter(|p| p.exists());
    if let Some(path) = score_manifest {
        let text = std::fs::read_to_string(&path)?;
        let sm: ScoreManifest =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if sm.config_hash != manifest.config_hash {
            return Err(CliError::validation(anyhow!(
                "{} was written for config {} but the reports carry {}",
                path.display(),
                sm.config_hash,
                manifest.config_hash
            )));
        }
        let complete = sm.complete;
        manifest = manifest.with_dropped(sm.excluded, sm.failed);
        manifest.complete = complete;
    }
    manifest.write(&args.out)?;
    let kept = manifest.retained_ids().count();
    eprintln!(
        "retained {kept} of {} documents -> {}",
        reports.len(),
        args.out.display()
    );
    for c in &manifest.comparison {
        eprintln!(
            "  {}: full {:.4}, random {:.4} (se {:.4}), prolong {:.4}",
            c.group, c.full_mean, c.random_mean, c.random_std_error, c.prolong_mean
        );
    }
    Ok(if manifest.complete { exit::OK } else { exit::PARTIAL })
}

// ---------------------------------------------------------------- heatmap

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Score output directory (must have been scored with --emit-pairs).
    #[arg(long)]
    pub run: PathBuf,
    /// Document to render; defaults to the first one in the sidecar.
    #[arg(long)]
    pub doc: Option<String>,
    /// Output path prefix; writes <out>.ppm and <out>.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// linear or diverging.
    #[arg(long, default_value = "linear")]
    pub scale: ColorScale,
    /// Pixels per cell side.
    #[arg(long, default_value_t = 4)]
    pub cell_size: usize,
    /// dst or lds.
    #[arg(long, default_value = "dst")]
    pub value: HeatValue,
}

fn find_pairs(path: &Path, doc: Option<&str>) -> anyhow::Result<PairsRecord> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(want) = doc {
            // Cheap prefilter before a full parse of a large record.
            if !line.contains(&format!("\"doc_id\":{}", serde_json::to_string(want)?)) {
                continue;
            }
        }
        let rec: PairsRecord = serde_json::from_str(&line).with_context(|| format!("bad record in {}", path.display()))?;
        if doc.is_none_or(|d| d == rec.doc_id) {
            return Ok(rec);
        }
    }
    match doc {
        Some(d) => bail!("document {d:?} is not in {}", path.display()),
        None => bail!("{} is empty", path.display()),
    }
}

pub fn heatmap(args: HeatmapArgs) -> CliResult<u8> {
    let sidecar = args.run.join(PAIRS_FILE);
    if !sidecar.exists() {
        return Err(CliError::validation(anyhow!(
            "no pair sidecar at {}; re-run `lds score` with --emit-pairs to write it",
            sidecar.display()
        )));
    }
    if args.cell_size == 0 {
        return Err(CliError::validation(anyhow!("--cell-size must be at least 1")));
    }
    let rec = find_pairs(&sidecar, args.doc.as_deref()).map_err(CliError::validation)?;
    let mut spec = HeatmapSpec::new(rec.doc_id.clone(), rec.n_segments);
    spec.scale = args.scale;
    spec.cell_size = args.cell_size;
    spec.value = args.value;
    let rendered = render_heatmap(&rec.pairs, &spec).map_err(CliError::validation)?;

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let with_ext = |ext: &str| {
        let mut p = args.out.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    std::fs::write(with_ext(".ppm"), &rendered.ppm)?;
    std::fs::write(with_ext(".csv"), &rendered.csv)?;
    write_json(
        &with_ext(".json"),
        &serde_json::json!({
            "doc_id": rec.doc_id,
            "config_hash": rec.config_hash,
            "n_segments": rec.n_segments,
            "pairs": rec.pairs.len(),
            "spec": spec,
        }),
    )?;
    eprintln!(
        "{}: {} of {} cells -> {}.ppm",
        rec.doc_id,
        rec.pairs.len(),
        rec.n_segments * rec.n_segments.saturating_sub(1) / 2,
        args.out.display()
    );
    Ok(exit::OK)
}

// ---------------------------------------------------------------- bench

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated backends: ngram, ngram:<model>, oracle, external:<endpoint>.
    #[arg(long, value_delimiter = ',', default_value = "ngram")]
    pub backend: Vec<String>,
    /// Comma-separated sample sizes T.
    #[arg(long = "samples-list", value_delimiter = ',', default_value = "500,5000")]
    pub samples: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub n_positive: usize,
    #[arg(long, default_value_t = 100)]
    pub n_negative: usize,
    /// Tokens per synthetic document.
    #[arg(long, default_value_t = 32768)]
    pub doc_tokens: usize,
    /// Seed of the synthetic test set.
    #[arg(long, default_value_t = 7)]
    pub synth_seed: u64,
    /// Background documents used to train the built-in n-gram scorer.
    #[arg(long, default_value_t = 300)]
    pub background_docs: usize,
    /// CSV output path; a JSON copy with the config hash is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn bench(cfg: RunConfig, args: BenchArgs) -> CliResult<u8> {
    if args.samples.is_empty() || args.samples.contains(&0) {
        return Err(CliError::validation(anyhow!("--samples-list needs positive values")));
    }
    let spec = SynthSpec {
        n_positive: args.n_positive,
        n_negative: args.n_negative,
        doc_tokens: args.doc_tokens,
        segment_len: cfg.segment_len,
        positive: vec![Generator::KeyReference, Generator::EntityChain],
        negative: vec![Generator::ShortConcat, Generator::LocalOnly],
        seed: args.synth_seed,
    };
    if spec.n_positive == 0 || spec.n_negative == 0 {
        return Err(CliError::validation(anyhow!("both --n-positive and --n-negative must be positive")));
    }
    let lang = Language::standard();
    let testset = evalbench::generate_testset(&spec, &lang);
    let tok = tokenizer(&cfg);
    let cache_weight = match cfg.backend {
        BackendSpec::Ngram { cache_weight, .. } => cache_weight,
        BackendSpec::External { .. } => DEFAULT_CACHE_WEIGHT,
    };

    let mut backends: Vec<(String, Box<dyn PerplexityBackend>)> = Vec::new();
    for name in &args.backend {
        let b: Box<dyn PerplexityBackend> = match name.split_once(':') {
            None if name == "ngram" => {
                let model = evalbench::background_model(&lang, args.background_docs, 1);
                Box::new(NGramBackend::with_cache_weight(Arc::new(model), cache_weight))
            }
            Some(("ngram", path)) => {
                let model = NGramModel::load(Path::new(path))
                    .with_context(|| format!("loading {path}"))
                    .map_err(CliError::validation)?;
                Box::new(NGramBackend::with_cache_weight(Arc::new(model), cache_weight))
            }
            None if name == "oracle" => {
                Box::new(OracleBackend::new(&testset, &tok, cfg.segment_len, cfg.max_tokens))
            }
            Some(("external", ep)) => Box::new(connect_external(ep, 4096, "", 4)?),
            _ => {
                return Err(CliError::validation(anyhow!(
                    "unknown backend {name:?} (ngram, ngram:<model>, oracle, external:<endpoint>)"
                )))
            }
        };
        backends.push((name.clone(), b));
    }

    let mut base = PipelineConfig::new(cfg.lds.clone(), cfg.segment_len, cfg.max_tokens);
    base.tokenizer = tok;
    base.workers = cfg.workers;
    let refs: Vec<(&str, &dyn PerplexityBackend)> = backends.iter().map(|(n, b)| (n.as_str(), b.as_ref())).collect();
    let results = evalbench::run_bench(&testset, &refs, &args.samples, &base);

    print!("{}", evalbench::bench_table(&results));
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, evalbench::bench_csv(&results)).with_context(|| format!("writing {}", out.display()))?;
        let describe: Vec<String> = backends.iter().map(|(_, b)| b.describe()).collect();
        write_json(
            &out.with_extension("json"),
            &serde_json::json!({
                "config_hash": cfg.hash(&describe.join(";")),
                "spec": spec,
                "backends": describe,
                "results": results,
            }),
        )?;
    }
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    Ok(if failed == 0 { exit::OK } else { exit::PARTIAL })
}
