//! Long-dependency scoring for long-context training data.
//!
//! A document is split into `N` equal-length segments. Every ordered pair of
//! segments `(c_j, c_i)` with `j < i` is scored by how much `c_j` lowers the
//! perplexity of `c_i` (dependency strength), how far apart the two segments
//! are (dependency distance), and how specific the dependency is compared to
//! all other predecessors of `c_i` (dependency specificity). The pair scores
//! are accumulated into a single Long Dependency Score (LDS) per document,
//! which is then used to rank and filter a corpus.
//!
//! Module map:
//!
//! * [`corpus`]: ingestion, tokenization and the segment grid.
//! * [`scorer`]: perplexity backends (built-in n-gram, external process) and caching.
//! * [`lds`]: the score itself, exact and sampled.
//! * [`pipeline`]: parallel corpus scoring, ranking and selection manifests.
//! * [`viz`]: dependency-strength heatmaps.
//! * [`evalbench`]: synthetic test sets and the accuracy/throughput benchmark.
//! * [`config`]: run configuration and its canonical hash.

pub mod config;
pub mod corpus;
pub mod evalbench;
pub mod lds;
pub mod pipeline;
pub mod scorer;
pub mod viz;

mod util;

pub use corpus::{Document, Segment, SegmentGrid, TokenId, TokenizerKind, TokenizerSpec};
pub use lds::{DocumentScore, DspVariant, LdsConfig, PairScore, ScoreMode, ScoreReport};
pub use scorer::{PerplexityBackend, PplCache};
