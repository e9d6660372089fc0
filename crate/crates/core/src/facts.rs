//! Source text to analysis facts.
//!
//! Extraction is driven by a versioned pattern table (see `data/patterns.json`)
//! that maps sensitive API names and idioms onto a [`FactKind`] and an optional
//! [`DataCategory`]. Languages with a registered [`Frontend`] get structural
//! extraction; everything else goes through [`lexical_fallback`].

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Language, SpanRef};

mod structural;

pub use structural::CFamilyFrontend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FactKind {
    ApiCall,
    StringLiteral,
    UrlLiteral,
    PermissionDecl,
    ConsentGuard,
    CryptoUse,
    StorageWrite,
    NetworkSend,
    LogWrite,
    ClassDecl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DataCategory {
    DeviceId,
    Location,
    Camera,
    Microphone,
    Contacts,
    Sms,
    Keystrokes,
    Credentials,
    Generic,
}

impl DataCategory {
    pub const ALL: [DataCategory; 9] = [
        DataCategory::DeviceId,
        DataCategory::Location,
        DataCategory::Camera,
        DataCategory::Microphone,
        DataCategory::Contacts,
        DataCategory::Sms,
        DataCategory::Keystrokes,
        DataCategory::Credentials,
        DataCategory::Generic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DataCategory::DeviceId => "DEVICE_ID",
            DataCategory::Location => "LOCATION",
            DataCategory::Camera => "CAMERA",
            DataCategory::Microphone => "MICROPHONE",
            DataCategory::Contacts => "CONTACTS",
            DataCategory::Sms => "SMS",
            DataCategory::Keystrokes => "KEYSTROKES",
            DataCategory::Credentials => "CREDENTIALS",
            DataCategory::Generic => "GENERIC",
        }
    }

    pub fn parse(s: &str) -> Option<DataCategory> {
        let s = s.trim().trim_end_matches("_DATA");
        DataCategory::ALL.iter().copied().find(|c| c.as_str() == s)
    }

    /// Personal data beyond generic app telemetry.
    pub fn is_personal(&self) -> bool {
        !matches!(self, DataCategory::Generic)
    }
}

impl fmt::Display for DataCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub kind: FactKind,
    pub symbol: String,
    pub detail: String,
    pub span: SpanRef,
    pub language: Language,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_category: Option<DataCategory>,
    /// Pattern-table tag such as `weak_crypto` or `third_party`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    /// Set when the fact lies outside the requested focus span.
    #[serde(default)]
    pub contextual: bool,
}

#[derive(Debug, Error)]
pub enum FactError {
    #[error("cannot read pattern table {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed pattern table: {0}")]
    Format(String),
    #[error("pattern `{id}`: {reason}")]
    Pattern { id: String, reason: String },
    #[error("a frontend is already registered for `{0}`")]
    DuplicateFrontend(Language),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Exact (optionally dotted) identifier, matched on word boundaries.
    #[default]
    Identifier,
    /// Regular expression over a source line; capture group 1, when present,
    /// becomes the fact symbol.
    Regex,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternSpec {
    pub id: String,
    pub pattern: String,
    #[serde(default, rename = "match")]
    pub mode: MatchMode,
    pub kind: FactKind,
    #[serde(default)]
    pub data_category: Option<DataCategory>,
    /// Empty means every language.
    #[serde(default)]
    pub languages: Vec<Language>,
    #[serde(default)]
    pub tag: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CompiledPattern {
    pub spec: PatternSpec,
    pub regex: Regex,
    /// Dotted segments for identifier patterns.
    pub segments: Vec<String>,
}

impl CompiledPattern {
    pub fn applies_to(&self, language: Language) -> bool {
        self.spec.languages.is_empty() || self.spec.languages.contains(&language)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PatternDoc {
    version: u32,
    patterns: Vec<PatternSpec>,
}

/// The sensitive-API table shared by every frontend.
#[derive(Debug, Clone)]
pub struct PatternTable {
    pub version: u32,
    pub patterns: Vec<CompiledPattern>,
}

const DEFAULT_PATTERNS: &str = include_str!("../data/patterns.json");

impl PatternTable {
    pub fn builtin() -> Arc<PatternTable> {
        static TABLE: OnceLock<Arc<PatternTable>> = OnceLock::new();
        TABLE
            .get_or_init(|| {
                Arc::new(PatternTable::parse(DEFAULT_PATTERNS).expect("bundled pattern table"))
            })
            .clone()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PatternTable, FactError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| FactError::Io {
            path: path.display().to_string(),
            source,
        })?;
        PatternTable::parse(&text)
    }

    pub fn parse(text: &str) -> Result<PatternTable, FactError> {
        let doc: PatternDoc =
            serde_json::from_str(text).map_err(|e| FactError::Format(e.to_string()))?;
        let mut seen = std::collections::HashSet::new();
        let mut patterns = Vec::with_capacity(doc.patterns.len());
        for spec in doc.patterns {
            if !seen.insert(spec.id.clone()) {
                return Err(FactError::Pattern {
                    id: spec.id,
                    reason: "duplicate id".into(),
                });
            }
            patterns.push(compile(spec)?);
        }
        Ok(PatternTable {
            version: doc.version,
            patterns,
        })
    }
}

fn compile(spec: PatternSpec) -> Result<CompiledPattern, FactError> {
    let bad = |reason: String| FactError::Pattern {
        id: spec.id.clone(),
        reason,
    };
    let (regex, segments) = match spec.mode {
        MatchMode::Identifier => {
            let segments: Vec<String> = spec.pattern.split('.').map(str::to_string).collect();
            let ident = Regex::new(r"^[A-Za-z_$][A-Za-z0-9_$]*$").unwrap();
            if segments.iter().any(|s| !ident.is_match(s)) {
                return Err(bad(format!(
                    "`{}` is not a dotted identifier",
                    spec.pattern
                )));
            }
            let body = segments
                .iter()
                .map(|s| regex::escape(s))
                .collect::<Vec<_>>()
                .join(r"\s*\.\s*");
            let re = Regex::new(&format!(
                r"(?:^|[^A-Za-z0-9_$])({body})(?:$|[^A-Za-z0-9_$])"
            ))
            .map_err(|e| bad(e.to_string()))?;
            (re, segments)
        }
        MatchMode::Regex => (
            Regex::new(&spec.pattern).map_err(|e| bad(e.to_string()))?,
            Vec::new(),
        ),
    };
    Ok(CompiledPattern {
        spec,
        regex,
        segments,
    })
}

/// A per-language extraction strategy.
pub trait Frontend: Send + Sync {
    fn name(&self) -> &str;

    /// Errors make the extractor fall back to lexical matching.
    fn extract(
        &self,
        source: &str,
        language: Language,
        table: &PatternTable,
    ) -> Result<Vec<Fact>, String>;
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"["'`]((?i:https?|wss?|ftp)://[^"'`\s]*)["'`]"#).unwrap())
}

fn class_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\b(?:class|interface|enum|object|struct)\s+([A-Z][A-Za-z0-9_]*)").unwrap()
    })
}

pub(crate) fn url_fact(url: &str, line: usize, language: Language) -> Fact {
    Fact {
        kind: FactKind::UrlLiteral,
        symbol: url.split("://").next().unwrap_or("").to_ascii_lowercase(),
        detail: url.to_string(),
        span: SpanRef::line(line).expect("1-based line"),
        language,
        data_category: None,
        tag: None,
        contextual: false,
    }
}

/// Applies regex patterns to one line of text.
pub(crate) fn regex_line_facts(
    table: &PatternTable,
    text: &str,
    line: usize,
    language: Language,
    out: &mut Vec<Fact>,
) {
    for p in &table.patterns {
        if p.spec.mode != MatchMode::Regex || !p.applies_to(language) {
            continue;
        }
        for caps in p.regex.captures_iter(text) {
            let whole = caps.get(0).unwrap().as_str();
            let symbol = caps.get(1).map(|m| m.as_str()).unwrap_or(whole);
            out.push(table_fact(p, symbol, whole.trim(), line, language));
        }
    }
}

pub(crate) fn table_fact(
    p: &CompiledPattern,
    symbol: &str,
    detail: &str,
    line: usize,
    language: Language,
) -> Fact {
    Fact {
        kind: p.spec.kind,
        symbol: symbol.to_string(),
        detail: detail.to_string(),
        span: SpanRef::line(line).expect("1-based line"),
        language,
        data_category: p.spec.data_category,
        tag: p.spec.tag.clone(),
        contextual: false,
    }
}

/// Token-level extraction that works for any language.
pub fn lexical_fallback(source: &str, language: Language, table: &PatternTable) -> Vec<Fact> {
    let mut out = Vec::new();
    for (idx, text) in source.lines().enumerate() {
        let line = idx + 1;
        for p in &table.patterns {
            if p.spec.mode != MatchMode::Identifier || !p.applies_to(language) {
                continue;
            }
            for caps in p.regex.captures_iter(text) {
                let m = caps.get(1).unwrap().as_str();
                let symbol = p.segments.last().map(String::as_str).unwrap_or(m);
                out.push(table_fact(p, symbol, m, line, language));
            }
        }
        regex_line_facts(table, text, line, language, &mut out);
        for caps in url_re().captures_iter(text) {
            out.push(url_fact(&caps[1], line, language));
        }
        for caps in class_re().captures_iter(text) {
            out.push(Fact {
                kind: FactKind::ClassDecl,
                symbol: caps[1].to_string(),
                detail: caps[0].to_string(),
                span: SpanRef::line(line).unwrap(),
                language,
                data_category: None,
                tag: None,
                contextual: false,
            });
        }
    }
    normalize(out)
}

fn normalize(mut facts: Vec<Fact>) -> Vec<Fact> {
    facts.sort_by(|a, b| {
        (
            a.span,
            a.kind,
            &a.symbol,
            &a.detail,
            a.data_category,
            &a.tag,
        )
            .cmp(&(
                b.span,
                b.kind,
                &b.symbol,
                &b.detail,
                b.data_category,
                &b.tag,
            ))
    });
    facts.dedup();
    facts
}

/// Registry of frontends; immutable once built.
pub struct ExtractorBuilder {
    table: Arc<PatternTable>,
    frontends: HashMap<Language, Arc<dyn Frontend>>,
}

impl ExtractorBuilder {
    pub fn register_frontend(
        &mut self,
        language: Language,
        frontend: Arc<dyn Frontend>,
    ) -> Result<&mut Self, FactError> {
        if self.frontends.contains_key(&language) {
            return Err(FactError::DuplicateFrontend(language));
        }
        self.frontends.insert(language, frontend);
        Ok(self)
    }

    pub fn build(self) -> FactExtractor {
        FactExtractor {
            table: self.table,
            frontends: self.frontends,
        }
    }
}

#[derive(Clone)]
pub struct FactExtractor {
    table: Arc<PatternTable>,
    frontends: HashMap<Language, Arc<dyn Frontend>>,
}

impl fmt::Debug for FactExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut langs: Vec<_> = self.frontends.keys().collect();
        langs.sort();
        f.debug_struct("FactExtractor")
            .field("table_version", &self.table.version)
            .field("frontends", &langs)
            .finish()
    }
}

impl Default for FactExtractor {
    fn default() -> Self {
        Self::with_defaults(PatternTable::builtin())
    }
}

impl FactExtractor {
    /// Builder with no frontends registered.
    pub fn builder(table: Arc<PatternTable>) -> ExtractorBuilder {
        ExtractorBuilder {
            table,
            frontends: HashMap::new(),
        }
    }

    /// Structural Java and Kotlin frontends over the given table.
    pub fn with_defaults(table: Arc<PatternTable>) -> Self {
        let mut b = Self::builder(table);
        b.register_frontend(Language::Java, Arc::new(CFamilyFrontend::java()))
            .and_then(|b| b.register_frontend(Language::Kt, Arc::new(CFamilyFrontend::kotlin())))
            .expect("distinct languages");
        b.build()
    }

    pub fn table(&self) -> &PatternTable {
        &self.table
    }

    pub fn has_frontend(&self, language: Language) -> bool {
        self.frontends.contains_key(&language)
    }

    /// Facts in span order. Facts outside `focus` are kept but marked contextual.
    pub fn extract_facts(
        &self,
        source: &str,
        language: Language,
        focus: Option<SpanRef>,
    ) -> Vec<Fact> {
        if source.trim().is_empty() {
            return Vec::new();
        }
        let facts = match self.frontends.get(&language) {
            Some(fe) => match fe.extract(source, language, &self.table) {
                Ok(facts) => normalize(facts),
                Err(reason) => {
                    log::debug!(
                        "{} frontend failed ({reason}); using lexical fallback",
                        fe.name()
                    );
                    lexical_fallback(source, language, &self.table)
                }
            },
            None => lexical_fallback(source, language, &self.table),
        };
        let line_count = source.lines().count().max(1);
        facts
            .into_iter()
            .filter(|f| f.span.end_line <= line_count)
            .map(|mut f| {
                if let Some(focus) = focus {
                    f.contextual = !focus.contains(&f.span);
                }
                f
            })
            .collect()
    }
}
