use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::DroppedDoc;
use crate::lds::{LdsConfig, ScoreReport};
use crate::util::{fnv64, mean, median, sha256_hex};

/// Group name used when ranking ignores sources.
pub const GLOBAL_GROUP: &str = "*";

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no reports to select from")]
    Empty,
    #[error("reports were scored under different configurations ({0} and {1})")]
    MixedConfig(String, String),
    #[error("fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Keep the top fraction by LDS.
    Prolong,
    /// Keep a seeded uniform random fraction.
    Random,
    /// Keep everything.
    Full,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prolong" => Ok(Self::Prolong),
            "random" => Ok(Self::Random),
            "full" => Ok(Self::Full),
            _ => Err(format!("unknown strategy {s:?} (prolong, random, full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    pub strategy: Strategy,
    pub fraction: f64,
    /// Rank each source independently; otherwise one global ranking.
    pub per_source: bool,
    pub seed: u64,
    /// Sources kept in full regardless of strategy.
    pub passthrough_sources: Vec<String>,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            strategy: Strategy::Prolong,
            fraction: 0.5,
            per_source: true,
            seed: 0,
            passthrough_sources: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub source: String,
    pub lds: f64,
    /// 1-based rank within the group, by LDS descending.
    pub rank: usize,
    pub retained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub retained: usize,
    pub full_mean: f64,
    pub full_median: f64,
    pub retained_mean: f64,
    pub retained_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSelection {
    pub group: String,
    pub retention_fraction: f64,
    pub documents: Vec<RankedDoc>,
    pub stats: GroupStats,
}

/// Mean LDS of the three selection arms for one group at the run's fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyComparison {
    pub group: String,
    pub subset_size: usize,
    pub full_mean: f64,
    pub random_mean: f64,
    /// Standard error of a random subset mean (without replacement).
    pub random_std_error: f64,
    pub prolong_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub run_id: String,
    pub complete: bool,
    pub strategy: Strategy,
    pub fraction: f64,
    pub per_source: bool,
    pub seed: u64,
    pub config_hash: String,
    pub config: LdsConfig,
    /// Unit used for segment length and truncation.
    pub token_units: String,
    pub groups: Vec<GroupSelection>,
    pub comparison: Vec<StrategyComparison>,
    pub excluded: Vec<DroppedDoc>,
    pub failed: Vec<DroppedDoc>,
}

impl SelectionManifest {
    pub fn retained_ids(&self) -> impl Iterator<Item = &str> {
        self.groups
            .iter()
            .flat_map(|g| g.documents.iter().filter(|d| d.retained).map(|d| d.doc_id.as_str()))
    }

    pub fn rejected_ids(&self) -> impl Iterator<Item = &str> {
        self.groups
            .iter()
            .flat_map(|g| g.documents.iter().filter(|d| !d.retained).map(|d| d.doc_id.as_str()))
    }

    pub fn with_dropped(mut self, excluded: Vec<DroppedDoc>, failed: Vec<DroppedDoc>) -> Self {
        self.excluded = excluded;
        self.failed = failed;
        self.excluded.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        self.failed.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    /// Writes `manifest.json` and `retained_ids.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SelectionError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), self.to_json())?;
        let mut ids = std::io::BufWriter::new(std::fs::File::create(dir.join("retained_ids.txt"))?);
        for id in self.retained_ids() {
            writeln!(ids, "{id}")?;
        }
        ids.flush()?;
        Ok(())
    }
}

fn subset_size(fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    // Tolerance absorbs products like 0.3 * 10 = 3.0000000000000004.
    (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

fn group_rng(seed: u64, group: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv64(group.as_bytes()))
}

fn random_subset(n: usize, k: usize, seed: u64, group: &str) -> Vec<usize> {
    let mut rng = group_rng(seed, group);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Ranks reports and marks the retained subset according to `opts`.
pub fn select(reports: &[ScoreReport], opts: &SelectionOptions) -> Result<SelectionManifest, SelectionError> {
    let first = reports.first().ok_or(SelectionError::Empty)?;
    if let Some(other) = reports.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(SelectionError::MixedConfig(first.config_hash.clone(), other.config_hash.clone()));
    }
    let fraction = match opts.strategy {
        Strategy::Full => 1.0,
        _ => opts.fraction,
    };
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SelectionError::BadFraction(fraction));
    }

    let mut groups: BTreeMap<String, Vec<&ScoreReport>> = BTreeMap::new();
    for r in reports {
        let key = if opts.per_source {
            r.source.clone()
        } else {
            GLOBAL_GROUP.to_string()
        };
        groups.entry(key).or_default().push(r);
    }

    let mut selections = Vec::new();
    let mut comparison = Vec::new();
    for (group, mut members) in groups {
        members.sort_by(|a, b| b.lds.total_cmp(&a.lds).then_with(|| a.doc_id.cmp(&b.doc_id)));
        let n = members.len();
        let passthrough = opts.passthrough_sources.contains(&group);
        let group_fraction = if passthrough { 1.0 } else { fraction };
        let k = subset_size(group_fraction, n);
        let mut keep = vec![false; n];
        match opts.strategy {
            Strategy::Random if !passthrough => {
                for i in random_subset(n, k, opts.seed, &group) {
                    keep[i] = true;
                }
            }
            _ => keep[..k].iter_mut().for_each(|b| *b = true),
        }

        let all: Vec<f64> = members.iter().map(|r| r.lds).collect();
        let kept: Vec<f64> = all.iter().zip(&keep).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
        let documents = members
            .iter()
            .zip(&keep)
            .enumerate()
            .map(|(rank, (r, &retained))| RankedDoc {
                doc_id: r.doc_id.clone(),
                source: r.source.clone(),
                lds: r.lds,
                rank: rank + 1,
                retained,
            })
            .collect();

        let arm_k = subset_size(fraction, n);
        let random_idx = random_subset(n, arm_k, opts.seed, &group);
        let random_vals: Vec<f64> = random_idx.iter().map(|&i| all[i]).collect();
        comparison.push(StrategyComparison {
            group: group.clone(),
            subset_size: arm_k,
            full_mean: mean(&all),
            random_mean: mean(&random_vals),
            random_std_error: subset_mean_std_error(&all, arm_k),
            prolong_mean: mean(&all[..arm_k]),
        });
        selections.push(GroupSelection {
            group,
            retention_fraction: group_fraction,
            stats: GroupStats {
                count: n,
                retained: kept.len(),
                full_mean: mean(&all),
                full_median: median(&all),
                retained_mean: mean(&kept),
                retained_median: median(&kept),
            },
            documents,
        });
    }

    let mut fingerprint = format!(
        "{}|{:?}|{}|{}|{}",
        first.config_hash, opts.strategy, fraction, opts.per_source, opts.seed
    );
    for g in &selections {
        for d in &g.documents {
            fingerprint.push('|');
            fingerprint.push_str(&d.doc_id);
        }
    }
    Ok(SelectionManifest {
        run_id: sha256_hex(fingerprint.as_bytes(), 16),
        complete: true,
        strategy: opts.strategy,
        fraction,
        per_source: opts.per_source,
        seed: opts.seed,
        config_hash: first.config_hash.clone(),
        config: first.config.clone(),
        token_units: "pipeline-tokenizer".to_string(),
        groups: selections,
        comparison,
        excluded: Vec::new(),
        failed: Vec::new(),
    })
}

/// Standard error of the mean of a size-`k` sample drawn without replacement.
fn subset_mean_std_error(values: &[f64], k: usize) -> f64 {
    let n = values.len();
    if n < 2 || k == 0 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
    (var / k as f64 * (n - k) as f64 / (n - 1) as f64).sqrt()
}

/// Top-`fraction` selection by LDS.
pub fn rank_and_select(
    reports: &[ScoreReport],
    fraction: f64,
    per_source: bool,
) -> Result<SelectionManifest, SelectionError> {
    select(
        reports,
        &SelectionOptions {
            strategy: Strategy::Prolong,
            fraction,
            per_source,
            ..SelectionOptions::default()
        },
    )
}

/// Seeded uniform per-source selection of the same size.
pub fn random_baseline(reports: &[ScoreReport], fraction: f64, seed: u64) -> Result<SelectionManifest, SelectionError> {
    select(
        reports,
        &SelectionOptions {
            strategy: Strategy::Random,
            fraction,
            per_source: true,
            seed,
            ..SelectionOptions::default()
        },
    )
}
