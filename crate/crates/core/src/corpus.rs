//! Annotated violation corpus: loading, span parsing and summary statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is not a JSON array of records: {0}")]
    Document(String),
    #[error("record {index}: missing field `{field}`")]
    MissingField { index: usize, field: &'static str },
    #[error("record {index}: invalid field `{field}`: {reason}")]
    InvalidField {
        index: usize,
        field: &'static str,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid line spec in `{input}`: {reason}")]
pub struct SpanParseError {
    pub input: String,
    pub reason: String,
}

/// One annotated (snippet, article) violation with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub app_name: String,
    pub repo_url: String,
    #[serde(alias = "Commit_ID")]
    pub commit_id: String,
    pub violated_article: u32,
    pub code_snippet_path: String,
    pub code_snippet: String,
    pub annotation_note: String,
}

/// Inclusive 1-based line range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SpanRef {
    pub start_line: usize,
    pub end_line: usize,
}

impl SpanRef {
    pub fn new(start_line: usize, end_line: usize) -> Option<Self> {
        (start_line >= 1 && start_line <= end_line).then_some(Self {
            start_line,
            end_line,
        })
    }

    pub fn line(n: usize) -> Option<Self> {
        Self::new(n, n)
    }

    pub fn is_single_line(&self) -> bool {
        self.start_line == self.end_line
    }

    pub fn contains(&self, other: &SpanRef) -> bool {
        self.start_line <= other.start_line && other.end_line <= self.end_line
    }

    pub fn overlaps(&self, other: &SpanRef) -> bool {
        self.start_line <= other.end_line && other.start_line <= self.end_line
    }

    pub fn line_count(&self) -> usize {
        self.end_line - self.start_line + 1
    }
}

impl fmt::Display for SpanRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_single_line() {
            write!(f, "line {}", self.start_line)
        } else {
            write!(f, "lines {}-{}", self.start_line, self.end_line)
        }
    }
}

/// Source language inferred from a file extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Js,
    Json,
    Java,
    Kt,
    Cs,
    Php,
    Xml,
    Html,
    Py,
    H,
    Unknown,
}

impl Language {
    pub const ALL: [Language; 11] = [
        Language::Js,
        Language::Json,
        Language::Java,
        Language::Kt,
        Language::Cs,
        Language::Php,
        Language::Xml,
        Language::Html,
        Language::Py,
        Language::H,
        Language::Unknown,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Language::Js => "js",
            Language::Json => "json",
            Language::Java => "java",
            Language::Kt => "kt",
            Language::Cs => "cs",
            Language::Php => "php",
            Language::Xml => "xml",
            Language::Html => "html",
            Language::Py => "py",
            Language::H => "h",
            Language::Unknown => "unknown",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Language> {
        Language::ALL
            .iter()
            .copied()
            .find(|l| l.as_str().eq_ignore_ascii_case(tag.trim()))
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Maps a path's extension (case-insensitive) onto the language taxonomy.
pub fn detect_language(file_path: &str) -> Language {
    let name = file_path
        .rsplit(['/', '\\'])
        .next()
        .unwrap_or(file_path)
        .trim();
    match name.rsplit_once('.') {
        Some((stem, ext)) if !stem.is_empty() => {
            let ext = ext.to_ascii_lowercase();
            Language::ALL
                .iter()
                .copied()
                .find(|l| *l != Language::Unknown && l.as_str() == ext)
                .unwrap_or(Language::Unknown)
        }
        _ => Language::Unknown,
    }
}

const REQUIRED_FIELDS: [&str; 6] = [
    "app_name",
    "repo_url",
    "violated_article",
    "code_snippet_path",
    "code_snippet",
    "annotation_note",
];

fn commit_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[0-9a-fA-F]{40}$").unwrap())
}

/// Parses a corpus document held in memory.
pub fn parse_corpus(text: &str) -> Result<Vec<ViolationRecord>, CorpusError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| CorpusError::Document(e.to_string()))?;
    let Value::Array(items) = doc else {
        return Err(CorpusError::Document(
            "top-level value is not an array".into(),
        ));
    };
    items
        .into_iter()
        .enumerate()
        .map(|(index, item)| record_from_value(index, item))
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ViolationRecord>, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text)
}

fn record_from_value(index: usize, item: Value) -> Result<ViolationRecord, CorpusError> {
    let Value::Object(mut obj) = item else {
        return Err(CorpusError::InvalidField {
            index,
            field: "record",
            reason: "not a JSON object".into(),
        });
    };
    for field in REQUIRED_FIELDS {
        if !obj.contains_key(field) {
            return Err(CorpusError::MissingField { index, field });
        }
    }
    if !obj.contains_key("commit_id") {
        match obj.remove("Commit_ID") {
            Some(v) => {
                obj.insert("commit_id".into(), v);
            }
            None => {
                return Err(CorpusError::MissingField {
                    index,
                    field: "commit_id",
                })
            }
        }
    }
    let record: ViolationRecord =
        serde_json::from_value(Value::Object(obj)).map_err(|e| CorpusError::InvalidField {
            index,
            field: "record",
            reason: e.to_string(),
        })?;
    validate_record(index, &record)?;
    Ok(record)
}

fn validate_record(index: usize, r: &ViolationRecord) -> Result<(), CorpusError> {
    let invalid = |field, reason: &str| CorpusError::InvalidField {
        index,
        field,
        reason: reason.to_string(),
    };
    if !commit_re().is_match(&r.commit_id) {
        return Err(invalid("commit_id", "expected a 40-character hex SHA"));
    }
    if r.violated_article < 1 {
        return Err(invalid("violated_article", "article numbers start at 1"));
    }
    if r.code_snippet.is_empty() {
        return Err(invalid("code_snippet", "empty"));
    }
    if r.annotation_note.is_empty() {
        return Err(invalid("annotation_note", "empty"));
    }
    if r.code_snippet_path.trim().is_empty() {
        return Err(invalid("code_snippet_path", "empty"));
    }
    Ok(())
}

pub fn corpus_to_json(records: &[ViolationRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records serialize")
}

fn line_spec_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^lines?\s*(-?\d+)(?:\s*[\u{2013}\u{2014}-]\s*(-?\d+))?\s*$").unwrap()
    })
}

/// Splits `path: line N` / `path: lines A-B` into the path and its span.
///
/// Text after the last `:` that does not start with `line` is treated as part
/// of the path, so the span is absent.
pub fn parse_span(code_snippet_path: &str) -> Result<(String, Option<SpanRef>), SpanParseError> {
    let err = |reason: &str| SpanParseError {
        input: code_snippet_path.to_string(),
        reason: reason.to_string(),
    };
    let Some((path, spec)) = code_snippet_path.rsplit_once(':') else {
        return Ok((code_snippet_path.trim().to_string(), None));
    };
    let spec = spec.trim();
    if !spec.to_ascii_lowercase().starts_with("line") {
        return Ok((code_snippet_path.trim().to_string(), None));
    }
    let caps = line_spec_re()
        .captures(spec)
        .ok_or_else(|| err("expected `line N` or `lines A-B`"))?;
    let parse = |s: &str| -> Result<usize, SpanParseError> {
        let n: i64 = s.parse().map_err(|_| err("line number out of range"))?;
        if n < 1 {
            return Err(err("line numbers must be positive"));
        }
        usize::try_from(n).map_err(|_| err("line number out of range"))
    };
    let start = parse(&caps[1])?;
    let end = match caps.get(2) {
        Some(m) => parse(m.as_str())?,
        None => start,
    };
    let span = SpanRef::new(start, end).ok_or_else(|| err("start line exceeds end line"))?;
    Ok((path.trim().to_string(), Some(span)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
}

impl LengthStats {
    /// Population statistics over character counts; all zero for no input.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        if lengths.is_empty() {
            return Self {
                min: 0,
                max: 0,
                mean: 0.0,
                median: 0.0,
                stddev: 0.0,
            };
        }
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let mean = sorted.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let var = sorted
            .iter()
            .map(|&x| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        Self {
            min: sorted[0],
            max: sorted[n - 1],
            mean,
            median,
            stddev: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total_records: usize,
    pub single_line_count: usize,
    pub multi_line_count: usize,
    pub per_article_counts: BTreeMap<u32, usize>,
    pub per_extension_counts: BTreeMap<Language, usize>,
    pub snippet_length_stats: LengthStats,
    pub note_length_stats: LengthStats,
}

#[derive(Debug, Clone, Copy)]
pub struct StatsOptions {
    /// Count records without a line spec as multi-line.
    pub absent_span_is_multi_line: bool,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            absent_span_is_multi_line: true,
        }
    }
}

pub fn compute_stats(corpus: &[ViolationRecord]) -> CorpusStats {
    compute_stats_with(corpus, StatsOptions::default())
}

pub fn compute_stats_with(corpus: &[ViolationRecord], opts: StatsOptions) -> CorpusStats {
    let mut single = 0;
    let mut per_article = BTreeMap::new();
    let mut per_ext = BTreeMap::new();
    let mut snippet_lens = Vec::with_capacity(corpus.len());
    let mut note_lens = Vec::with_capacity(corpus.len());
    for r in corpus {
        let (file, span) = parse_span(&r.code_snippet_path)
            .unwrap_or_else(|_| (r.code_snippet_path.clone(), None));
        let is_single = match span {
            Some(s) => s.is_single_line(),
            None => !opts.absent_span_is_multi_line,
        };
        if is_single {
            single += 1;
        }
        *per_article.entry(r.violated_article).or_insert(0) += 1;
        *per_ext.entry(detect_language(&file)).or_insert(0) += 1;
        snippet_lens.push(r.code_snippet.chars().count());
        note_lens.push(r.annotation_note.chars().count());
    }
    CorpusStats {
        total_records: corpus.len(),
        single_line_count: single,
        multi_line_count: corpus.len() - single,
        per_article_counts: per_article,
        per_extension_counts: per_ext,
        snippet_length_stats: LengthStats::from_lengths(&snippet_lens),
        note_length_stats: LengthStats::from_lengths(&note_lens),
    }
}

/// Plain-text rendering of the stats for terminals.
pub fn stats_table(stats: &CorpusStats) -> String {
    let total = stats.total_records.max(1) as f64;
    let pct = |n: usize| 100.0 * n as f64 / total;
    let mut out = String::new();
    out.push_str(&format!("Total records: {}\n\n", stats.total_records));
    out.push_str("Granularity          Count  Percent\n");
    out.push_str(&format!(
        "Multi-line         {:>7}  {:>6.2}%\n",
        stats.multi_line_count,
        pct(stats.multi_line_count)
    ));
    out.push_str(&format!(
        "Single-line        {:>7}  {:>6.2}%\n\n",
        stats.single_line_count,
        pct(stats.single_line_count)
    ));
    out.push_str("Article              Count  Percent\n");
    let mut articles: Vec<_> = stats.per_article_counts.iter().collect();
    articles.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    for (art, n) in articles {
        out.push_str(&format!("Art. {:<14} {:>6}  {:>6.2}%\n", art, n, pct(*n)));
    }
    out.push_str("\nExtension            Count  Percent\n");
    let mut exts: Vec<_> = stats.per_extension_counts.iter().collect();
    exts.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    for (ext, n) in exts {
        let label = match ext {
            Language::Unknown => "(other)".to_string(),
            l => format!(".{l}"),
        };
        out.push_str(&format!("{:<19} {:>6}  {:>6.2}%\n", label, n, pct(*n)));
    }
    out.push_str("\nLength (chars)   Min    Max      Mean   Median   Std.Dev\n");
    for (name, s) in [
        ("Snippet", &stats.snippet_length_stats),
        ("Annotation", &stats.note_length_stats),
    ] {
        out.push_str(&format!(
            "{:<12} {:>6} {:>6} {:>9.2} {:>8.1} {:>9.2}\n",
            name, s.min, s.max, s.mean, s.median, s.stddev
        ));
    }
    out
}
