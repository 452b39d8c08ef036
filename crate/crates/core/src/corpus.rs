//! Document ingestion, tokenization and segmentation.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::fnv64;

pub type TokenId = u64;

/// Id assigned to words missing from a frozen vocabulary.
pub const UNKNOWN_TOKEN: TokenId = u64::MAX;

const WORD_ID_BIT: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("document {doc_id} is too short: {n_tokens} tokens yield fewer than 2 segments of {segment_len}")]
    DocumentTooShort {
        doc_id: String,
        n_tokens: usize,
        segment_len: usize,
    },
    #[error("invalid segmentation parameters: segment_len={segment_len}, max_tokens={max_tokens} (need segment_len >= 1 and max_tokens >= 2*segment_len)")]
    InvalidSegmentation {
        segment_len: usize,
        max_tokens: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    /// Split on Unicode whitespace; texts without any whitespace fall back to bytes.
    Whitespace,
    Byte,
}

impl std::str::FromStr for TokenizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whitespace" => Ok(Self::Whitespace),
            "byte" => Ok(Self::Byte),
            _ => Err(format!("unknown tokenizer {s:?} (whitespace, byte)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub kind: TokenizerKind,
    /// Frozen word -> id map. Words outside it become [`UNKNOWN_TOKEN`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<BTreeMap<String, TokenId>>,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self::whitespace()
    }
}

/// One token with its byte span in the source text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Token {
    pub id: TokenId,
    pub start: usize,
    pub end: usize,
}

impl TokenizerSpec {
    pub fn whitespace() -> Self {
        Self {
            kind: TokenizerKind::Whitespace,
            vocabulary: None,
        }
    }

    pub fn byte() -> Self {
        Self {
            kind: TokenizerKind::Byte,
            vocabulary: None,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        match self.kind {
            TokenizerKind::Byte => byte_tokens(text),
            TokenizerKind::Whitespace => {
                if !text.is_empty() && !text.chars().any(char::is_whitespace) {
                    return byte_tokens(text);
                }
                let mut out = Vec::new();
                for (start, word) in split_words(text) {
                    out.push(Token {
                        id: self.word_id(word),
                        start,
                        end: start + word.len(),
                    });
                }
                out
            }
        }
    }

    pub fn token_ids(&self, text: &str) -> Vec<TokenId> {
        self.tokenize(text).into_iter().map(|t| t.id).collect()
    }

    fn word_id(&self, word: &str) -> TokenId {
        match &self.vocabulary {
            Some(vocab) => vocab.get(word).copied().unwrap_or(UNKNOWN_TOKEN),
            // High bit keeps hashed word ids disjoint from byte ids.
            None => fnv64(word.as_bytes()) | WORD_ID_BIT,
        }
    }
}

fn byte_tokens(text: &str) -> Vec<Token> {
    text.bytes()
        .enumerate()
        .map(|(i, b)| Token {
            id: b as TokenId,
            start: i,
            end: i + 1,
        })
        .collect()
}

fn split_words(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut rest = text;
    let mut offset = 0;
    std::iter::from_fn(move || {
        let skip = rest.find(|c: char| !c.is_whitespace())?;
        let start = offset + skip;
        let body = &rest[skip..];
        let len = body.find(char::is_whitespace).unwrap_or(body.len());
        let word = &body[..len];
        offset = start + len;
        rest = &body[len..];
        Some((start, word))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source: String,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<TokenId>,
    #[serde(skip)]
    spans: Vec<(usize, usize)>,
}

impl Document {
    pub fn new(id: impl Into<String>, source: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            text: text.into(),
            tokens: Vec::new(),
            spans: Vec::new(),
        }
    }

    /// Fills `tokens` from `text`. Idempotent for a given tokenizer.
    pub fn tokenize(&mut self, tokenizer: &TokenizerSpec) {
        let toks = tokenizer.tokenize(&self.text);
        self.tokens = toks.iter().map(|t| t.id).collect();
        self.spans = toks.iter().map(|t| (t.start, t.end)).collect();
    }

    pub fn tokenized(mut self, tokenizer: &TokenizerSpec) -> Self {
        self.tokenize(tokenizer);
        self
    }

    /// Source text covering tokens `[from, to)`.
    fn text_of(&self, from: usize, to: usize) -> String {
        if from >= to || self.spans.len() < to {
            return String::new();
        }
        let a = self.spans[from].0;
        let b = self.spans[to - 1].1;
        String::from_utf8_lossy(&self.text.as_bytes()[a..b]).into_owned()
    }
}

/// A contiguous run of exactly `segment_len` tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub tokens: Vec<TokenId>,
    pub text: String,
}

impl Segment {
    pub fn new(tokens: Vec<TokenId>, text: impl Into<String>) -> Self {
        Self {
            tokens,
            text: text.into(),
        }
    }

    pub fn as_ref(&self) -> crate::scorer::SegmentRef<'_> {
        crate::scorer::SegmentRef {
            tokens: &self.tokens,
            text: &self.text,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentGrid {
    pub doc_id: String,
    pub source: String,
    pub segment_len: usize,
    /// Token count before truncation.
    pub original_len: usize,
    pub segments: Vec<Segment>,
}

impl SegmentGrid {
    /// Builds a grid directly from segments. Used by tests and synthetic fixtures.
    pub fn from_segments(
        doc_id: impl Into<String>,
        source: impl Into<String>,
        segments: Vec<Segment>,
    ) -> Result<Self, CorpusError> {
        let doc_id = doc_id.into();
        let segment_len = segments.first().map_or(0, |s| s.tokens.len());
        if segments.len() < 2 || segment_len == 0 {
            return Err(CorpusError::DocumentTooShort {
                n_tokens: segments.iter().map(|s| s.tokens.len()).sum(),
                doc_id,
                segment_len,
            });
        }
        assert!(
            segments.iter().all(|s| s.tokens.len() == segment_len),
            "segments must have equal length"
        );
        Ok(Self {
            doc_id,
            source: source.into(),
            segment_len,
            original_len: segment_len * segments.len(),
            segments,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }
}

/// Truncates a tokenized document to `max_tokens` and splits it into
/// `floor(len / segment_len)` segments, dropping the trailing remainder.
pub fn segment(doc: &Document, segment_len: usize, max_tokens: usize) -> Result<SegmentGrid, CorpusError> {
    if segment_len == 0 || max_tokens < 2 * segment_len {
        return Err(CorpusError::InvalidSegmentation {
            segment_len,
            max_tokens,
        });
    }
    let kept = doc.tokens.len().min(max_tokens);
    let n = kept / segment_len;
    if n < 2 {
        return Err(CorpusError::DocumentTooShort {
            doc_id: doc.id.clone(),
            n_tokens: doc.tokens.len(),
            segment_len,
        });
    }
    let segments = (0..n)
        .map(|s| {
            let (a, b) = (s * segment_len, (s + 1) * segment_len);
            Segment {
                tokens: doc.tokens[a..b].to_vec(),
                text: doc.text_of(a, b),
            }
        })
        .collect();
    Ok(SegmentGrid {
        doc_id: doc.id.clone(),
        source: doc.source.clone(),
        segment_len,
        original_len: doc.tokens.len(),
        segments,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    Jsonl,
    PlainDir,
}

impl std::str::FromStr for InputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "plain-dir" | "dir" => Ok(Self::PlainDir),
            _ => Err(format!("unknown input format {s:?} (jsonl, plain-dir)")),
        }
    }
}

#[derive(Debug, Default)]
struct IngestCounters {
    yielded: AtomicUsize,
    malformed: AtomicUsize,
    duplicate_ids: AtomicUsize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub yielded: usize,
    pub malformed: usize,
    pub duplicate_ids: usize,
}

impl IngestStats {
    pub fn skipped(&self) -> usize {
        self.malformed + self.duplicate_ids
    }
}

/// Lazily-read stream of documents in input order.
pub struct DocumentStream {
    inner: Box<dyn Iterator<Item = Document> + Send>,
    counters: Arc<IngestCounters>,
}

impl DocumentStream {
    pub fn stats(&self) -> IngestStats {
        IngestStats {
            yielded: self.counters.yielded.load(Ordering::Relaxed),
            malformed: self.counters.malformed.load(Ordering::Relaxed),
            duplicate_ids: self.counters.duplicate_ids.load(Ordering::Relaxed),
        }
    }

    /// Handle that keeps reporting counters after the stream has been moved.
    pub fn stats_handle(&self) -> IngestStatsHandle {
        IngestStatsHandle(self.counters.clone())
    }
}

#[derive(Clone)]
pub struct IngestStatsHandle(Arc<IngestCounters>);

impl IngestStatsHandle {
    pub fn get(&self) -> IngestStats {
        IngestStats {
            yielded: self.0.yielded.load(Ordering::Relaxed),
            malformed: self.0.malformed.load(Ordering::Relaxed),
            duplicate_ids: self.0.duplicate_ids.load(Ordering::Relaxed),
        }
    }
}

impl Iterator for DocumentStream {
    type Item = Document;

    fn next(&mut self) -> Option<Document> {
        let doc = self.inner.next()?;
        self.counters.yielded.fetch_add(1, Ordering::Relaxed);
        Some(doc)
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    text: String,
    #[serde(default)]
    source: Option<String>,
}

/// Opens `path` and streams its documents.
///
/// Malformed JSONL records, empty ids and repeated ids are skipped and
/// counted; only an unreadable path is an error.
pub fn ingest(path: &Path, format: InputFormat) -> Result<DocumentStream, CorpusError> {
    let counters = Arc::new(IngestCounters::default());
    let unreadable = |source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    };
    let inner: Box<dyn Iterator<Item = Document> + Send> = match format {
        InputFormat::Jsonl => {
            let file = File::open(path).map_err(unreadable)?;
            let default_source = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Box::new(jsonl_documents(BufReader::new(file), default_source, counters.clone()))
        }
        InputFormat::PlainDir => {
            let meta = std::fs::metadata(path).map_err(unreadable)?;
            if !meta.is_dir() {
                return Err(unreadable(std::io::Error::other("not a directory")));
            }
            Box::new(dir_documents(path.to_path_buf(), counters.clone()))
        }
    };
    Ok(DocumentStream { inner, counters })
}

fn jsonl_documents<R: BufRead + Send + 'static>(
    reader: R,
    default_source: String,
    counters: Arc<IngestCounters>,
) -> impl Iterator<Item = Document> + Send {
    let mut seen = HashSet::new();
    reader.lines().filter_map(move |line| {
        let Ok(line) = line else {
            counters.malformed.fetch_add(1, Ordering::Relaxed);
            return None;
        };
        if line.trim().is_empty() {
            return None;
        }
        let record: JsonlRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("skipping malformed record: {e}");
                counters.malformed.fetch_add(1, Ordering::Relaxed);
                return None;
            }
        };
        if record.id.is_empty() {
            counters.malformed.fetch_add(1, Ordering::Relaxed);
            return None;
        }
        if !seen.insert(record.id.clone()) {
            log::warn!("skipping duplicate id {}", record.id);
            counters.duplicate_ids.fetch_add(1, Ordering::Relaxed);
            return None;
        }
        let source = record.source.unwrap_or_else(|| default_source.clone());
        Some(Document::new(record.id, source, record.text))
    })
}

fn dir_documents(root: PathBuf, counters: Arc<IngestCounters>) -> impl Iterator<Item = Document> + Send {
    let root_name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    walkdir::WalkDir::new(root.clone())
        .sort_by_file_name()
        .into_iter()
        .filter_map(move |entry| {
            let entry = match entry {
                Ok(e) => e,
                Err(_) => {
                    counters.malformed.fetch_add(1, Ordering::Relaxed);
                    return None;
                }
            };
            if !entry.file_type().is_file() {
                return None;
            }
            let rel = entry.path().strip_prefix(&root).ok()?;
            let id = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            let source = if rel.components().count() > 1 {
                rel.components()
                    .next()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .unwrap_or_default()
            } else {
                root_name.clone()
            };
            match std::fs::read_to_string(entry.path()) {
                Ok(text) => Some(Document::new(id, source, text)),
                Err(_) => {
                    counters.malformed.fetch_add(1, Ordering::Relaxed);
                    None
                }
            }
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn doc_with_len(n: usize) -> Document {
        let text = (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        Document::new("d", "src", text).tokenized(&TokenizerSpec::whitespace())
    }

    #[test]
    fn jsonl_fields_map_directly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("books.jsonl");
        std::fs::write(&path, r#"{"id":"d1","text":"hello world","source":"book"}"#).unwrap();
        let docs: Vec<_> = ingest(&path, InputFormat::Jsonl).unwrap().collect();
        assert_eq!(docs, vec![Document::new("d1", "book", "hello world")]);
    }

    #[test]
    fn empty_file_yields_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let mut stream = ingest(&path, InputFormat::Jsonl).unwrap();
        assert!(stream.next().is_none());
        assert_eq!(stream.stats(), IngestStats::default());
    }

    #[test]
    fn malformed_lines_are_counted_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("code.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"id":"a","text":"x"}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","text":"#).unwrap();
        writeln!(f, r#"{{"id":"c","text":"y","source":"web"}}"#).unwrap();
        writeln!(f, r#"{{"id":"d","text":"z"}}"#).unwrap();
        drop(f);
        let mut stream = ingest(&path, InputFormat::Jsonl).unwrap();
        let docs: Vec<_> = stream.by_ref().collect();
        let ids: Vec<_> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["a", "c", "d"]);
        assert_eq!(docs[0].source, "code");
        assert_eq!(docs[1].source, "web");
        assert_eq!(stream.stats().skipped(), 1);
    }

    #[test]
    fn duplicate_ids_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n").unwrap();
        let mut stream = ingest(&path, InputFormat::Jsonl).unwrap();
        assert_eq!(stream.by_ref().count(), 1);
        assert_eq!(stream.stats().duplicate_ids, 1);
    }

    #[test]
    fn missing_path_is_fatal() {
        let err = ingest(Path::new("/nonexistent/x.jsonl"), InputFormat::Jsonl);
        assert!(matches!(err, Err(CorpusError::Unreadable { .. })));
    }

    #[test]
    fn plain_dir_ids_are_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("code")).unwrap();
        std::fs::write(dir.path().join("code/main.rs"), "fn main() {}").unwrap();
        std::fs::write(dir.path().join("top.txt"), "some text").unwrap();
        let docs: Vec<_> = ingest(dir.path(), InputFormat::PlainDir).unwrap().collect();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].id, "code/main.rs");
        assert_eq!(docs[0].source, "code");
        assert_eq!(docs[1].id, "top.txt");
    }

    #[test]
    fn segments_full_length_document() {
        let doc = doc_with_len(32768);
        let grid = segment(&doc, 128, 32768).unwrap();
        assert_eq!(grid.n_segments(), 256);
    }

    #[test]
    fn trailing_remainder_is_dropped() {
        let doc = doc_with_len(257);
        let grid = segment(&doc, 128, 32768).unwrap();
        assert_eq!(grid.n_segments(), 2);
        assert_eq!(grid.segments[1].tokens, doc.tokens[128..256]);
        assert_eq!(grid.segments[0].text.split(' ').next(), Some("w0"));
        assert!(grid.segments[1].text.ends_with("w255"));
    }

    #[test]
    fn short_document_is_rejected() {
        let doc = doc_with_len(200);
        match segment(&doc, 128, 32768) {
            Err(CorpusError::DocumentTooShort { doc_id, .. }) => assert_eq!(doc_id, "d"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_caps_segments() {
        let doc = doc_with_len(1000);
        let grid = segment(&doc, 100, 450).unwrap();
        assert_eq!(grid.n_segments(), 4);
    }

    #[test]
    fn bad_parameters_are_rejected() {
        let doc = doc_with_len(1000);
        assert!(matches!(segment(&doc, 0, 100), Err(CorpusError::InvalidSegmentation { .. })));
        assert!(matches!(segment(&doc, 100, 150), Err(CorpusError::InvalidSegmentation { .. })));
    }

    #[test]
    fn whitespace_tokenizer_falls_back_to_bytes() {
        let tok = TokenizerSpec::whitespace();
        assert_eq!(tok.token_ids("abc"), vec![97, 98, 99]);
        let words = tok.token_ids("a  b\ta");
        assert_eq!(words.len(), 3);
        assert_eq!(words[0], words[2]);
        assert!(words.iter().all(|&t| t >= WORD_ID_BIT));
    }

    #[test]
    fn frozen_vocabulary_maps_unknowns() {
        let vocab = BTreeMap::from([("a".to_string(), 1), ("b".to_string(), 2)]);
        let tok = TokenizerSpec {
            kind: TokenizerKind::Whitespace,
            vocabulary: Some(vocab),
        };
        assert_eq!(tok.token_ids("a b c"), vec![1, 2, UNKNOWN_TOKEN]);
    }

    #[test]
    fn token_spans_cover_words() {
        let toks = TokenizerSpec::whitespace().tokenize("  ab cd ");
        assert_eq!((toks[0].start, toks[0].end), (2, 4));
        assert_eq!((toks[1].start, toks[1].end), (5, 7));
    }
}
