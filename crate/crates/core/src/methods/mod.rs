//! Detection methods behind one contract: the formal engine, plain zero-shot
//! prompting, retrieval-augmented prompting and a tool-using agent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Language, SpanRef};
use crate::engine::{EngineError, FormalAnalyzer, MultiGranularity, RankedPrediction};
use crate::knowledge::{ArticleCatalog, KbDocKind, KnowledgeBase};

pub mod react;
pub mod reasoner;

pub use react::{react_run, AgentStep, AgentTrace, Tool, Toolbox};
pub use reasoner::{
    CachedReasoner, ChatMessage, FnReasoner, HttpReasoner, Reasoner, ReasonerError, ResponseCache,
    RetryPolicy, ScriptedReasoner,
};

#[derive(Debug, Error)]
pub enum MethodError {
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error("unparseable model output: {raw:?}")]
    Parse { raw: String },
    #[error("agent failed after {} step(s): {source}", trace.steps.len())]
    Agent {
        #[source]
        source: ReasonerError,
        trace: AgentTrace,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid inference config: {0}")]
    Config(String),
}

/// Fixed decoding settings shared by every model-backed method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_response_tokens: u32,
    pub completions: u32,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            max_response_tokens: 512,
            completions: 1,
            parallelism: 4,
            cache_dir: None,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), MethodError> {
        if self.completions != 1 {
            return Err(MethodError::Config(format!(
                "completions must be 1, got {}",
                self.completions
            )));
        }
        if self.parallelism == 0 {
            return Err(MethodError::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

/// Set of violated articles; empty means "no violation".
#[derive(Debug, Clone, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSet(pub BTreeSet<u32>);

impl LabelSet {
    pub fn new(items: impl IntoIterator<Item = u32>) -> Self {
        Self(items.into_iter().filter(|&a| a >= 1).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, a: u32) -> bool {
        self.0.contains(&a)
    }
}

/// Ascending comma list, or `0` for the empty set.
impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("0");
        }
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub labels: LabelSet,
    pub ranking: RankedPrediction,
}

impl ParsedOutput {
    fn from_ordered(items: Vec<u32>) -> Self {
        let ranking = RankedPrediction::from_ordered(items);
        Self {
            labels: LabelSet::new(ranking.articles.iter().copied()),
            ranking,
        }
    }
}

fn standalone_int() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b\d+\b").unwrap())
}

/// Highest article number in the regulation; larger integers in prose are years or counts.
pub const MAX_ARTICLE: u32 = 99;

/// Reads a model answer. Comma order is kept as the ranking.
pub fn parse_model_output(text: &str, mode: ParseMode) -> Result<ParsedOutput, MethodError> {
    let parse_err = || MethodError::Parse {
        raw: text.to_string(),
    };
    match mode {
        ParseMode::Strict => {
            let t = text.trim();
            if t == "0" {
                return Ok(ParsedOutput::from_ordered(Vec::new()));
            }
            let mut items = Vec::new();
            for part in t.split(',') {
                let p = part.trim();
                if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(parse_err());
                }
                match p.parse::<u32>() {
                    Ok(n) if n >= 1 => items.push(n),
                    _ => return Err(parse_err()),
                }
            }
            Ok(ParsedOutput::from_ordered(items))
        }
        ParseMode::Lenient => {
            let items = standalone_int()
                .find_iter(text)
                .filter_map(|m| m.as_str().parse::<u32>().ok())
                .filter(|&n| (1..=MAX_ARTICLE).contains(&n))
                .collect();
            Ok(ParsedOutput::from_ordered(items))
        }
    }
}

/// The zero-shot prompt with the snippet inserted verbatim.
pub fn render_prompt(snippet: &str, catalog: &ArticleCatalog) -> String {
    render_with_context(snippet, catalog, &[])
}

fn render_with_context(snippet: &str, catalog: &ArticleCatalog, context: &[String]) -> String {
    let mut p = String::from(
        "You are a GDPR compliance expert. Your task is to determine which GDPR articles are violated by the following code snippet.\n\nGDPR Article Meanings:\n",
    );
    for a in catalog.iter() {
        p.push_str("- ");
        p.push_str(&a.meaning_line());
        p.push('\n');
    }
    p.push_str(
        "\nInstructions:\n- Carefully analyze the code snippet.\n- Only output the violated GDPR article numbers, separated by commas (e.g.,5,6,32).\n- If there is no violation, output exactly 0.\n\n",
    );
    if !context.is_empty() {
        p.push_str("Retrieved Context:\n");
        for (i, c) in context.iter().enumerate() {
            p.push_str(&format!("[{}] {}\n", i + 1, c));
        }
        p.push('\n');
    }
    p.push_str("Code snippet:\n");
    p.push_str(snippet);
    p
}

/// Retrieval-augmented variant; with no retrieved docs it equals [`render_prompt`].
pub fn render_rag_prompt(
    snippet: &str,
    catalog: &ArticleCatalog,
    kb: &KnowledgeBase,
    top_n: usize,
) -> String {
    let context: Vec<String> = kb
        .retrieve(snippet, top_n)
        .into_iter()
        .map(|d| match d.kind {
            KbDocKind::ArticleText => d.body.clone(),
            KbDocKind::ViolationExample => format!(
                "Example violating articles {}:\n{}",
                LabelSet(d.labels.clone()),
                d.body.trim_end()
            ),
        })
        .collect();
    render_with_context(snippet, catalog, &context)
}

/// Everything a method needs to localize violations in one file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileContext {
    pub file_path: String,
    pub language: Language,
    pub source: String,
    pub modules: BTreeMap<String, SpanRef>,
    pub lines: Vec<SpanRef>,
}

impl FileContext {
    /// Source text of an inclusive 1-based line range.
    pub fn excerpt(&self, span: SpanRef) -> String {
        let mut out: String = self
            .source
            .lines()
            .skip(span.start_line - 1)
            .take(span.line_count())
            .collect::<Vec<_>>()
            .join("\n");
        out.push('\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Task2Prediction {
    pub labels: LabelSet,
    pub ranking: RankedPrediction,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<AgentTrace>,
}

pub trait Method: Send + Sync {
    fn name(&self) -> &str;

    fn predict_task1(&self, ctx: &FileContext) -> Result<MultiGranularity, MethodError>;

    fn predict_task2(
        &self,
        snippet: &str,
        language: Language,
    ) -> Result<Task2Prediction, MethodError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Formal,
    ZeroShot,
    Rag,
    React,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [
        MethodKind::Formal,
        MethodKind::ZeroShot,
        MethodKind::Rag,
        MethodKind::React,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodKind::Formal => "formal",
            MethodKind::ZeroShot => "zero_shot",
            MethodKind::Rag => "rag",
            MethodKind::React => "react",
        }
    }

    pub fn needs_reasoner(&self) -> bool {
        !matches!(self, MethodKind::Formal)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                format!("unknown method `{s}` (expected formal, zero_shot, rag or react)")
            })
    }
}

/// Runs one ranked query per scope of a file.
fn per_scope(
    ctx: &FileContext,
    mut rank: impl FnMut(&str) -> Result<RankedPrediction, MethodError>,
) -> Result<MultiGranularity, MethodError> {
    let file = rank(&ctx.source)?;
    let mut modules = BTreeMap::new();
    for (name, span) in &ctx.modules {
        modules.insert(name.clone(), rank(&ctx.excerpt(*span))?);
    }
    let mut lines = Vec::with_capacity(ctx.lines.len());
    for span in &ctx.lines {
        lines.push((*span, rank(&ctx.excerpt(*span))?));
    }
    Ok(MultiGranularity {
        file,
        modules,
        lines,
    })
}

pub struct FormalMethod {
    analyzer: FormalAnalyzer,
}

impl FormalMethod {
    pub fn new(analyzer: FormalAnalyzer) -> Self {
        Self { analyzer }
    }
}

impl Default for FormalMethod {
    fn default() -> Self {
        Self::new(FormalAnalyzer::default())
    }
}

impl Method for FormalMethod {
    fn name(&self) -> &str {
        "formal"
    }

    fn predict_task1(&self, ctx: &FileContext) -> Result<MultiGranularity, MethodError> {
        Ok(self.analyzer.analyze_multigranularity(
            &ctx.source,
            ctx.language,
            &ctx.modules,
            &ctx.lines,
        )?)
    }

    fn predict_task2(
        &self,
        snippet: &str,
        language: Language,
    ) -> Result<Task2Prediction, MethodError> {
        let a = self.analyzer.analyze(snippet, language, None);
        Ok(Task2Prediction {
            labels: LabelSet::new(a.ranking.articles.iter().copied()),
            ranking: a.ranking,
            raw: None,
            trace: None,
        })
    }
}

fn ask(
    reasoner: &dyn Reasoner,
    prompt: String,
    config: &InferenceConfig,
    mode: ParseMode,
) -> Result<(ParsedOutput, String), MethodError> {
    let raw = reasoner.complete(&[ChatMessage::user(prompt)], config)?;
    let parsed = parse_model_output(&raw, mode)?;
    Ok((parsed, raw))
}

pub struct ZeroShotMethod {
    reasoner: Arc<dyn Reasoner>,
    catalog: Arc<ArticleCatalog>,
    config: InferenceConfig,
    mode: ParseMode,
}

impl ZeroShotMethod {
    pub fn new(
        reasoner: Arc<dyn Reasoner>,
        catalog: Arc<ArticleCatalog>,
        config: InferenceConfig,
    ) -> Self {
        Self {
            reasoner,
            catalog,
            config,
            mode: ParseMode::Strict,
        }
    }

    pub fn with_parse_mode(mut self, mode: ParseMode) -> Self {
        self.mode = mode;
        self
    }
}

pub fn zero_shot_predict(
    snippet: &str,
    reasoner: &dyn Reasoner,
    catalog: &ArticleCatalog,
    config: &InferenceConfig,
    mode: ParseMode,
) -> Result<Task2Prediction, MethodError> {
    let (p, raw) = ask(reasoner, render_prompt(snippet, catalog), config, mode)?;
    Ok(Task2Prediction {
        labels: p.labels,
        ranking: p.ranking,
        raw: Some(raw),
        trace: None,
    })
}

impl Method for ZeroShotMethod {
    fn name(&self) -> &str {
        "zero_shot"
    }

    fn predict_task1(&self, ctx: &FileContext) -> Result<MultiGranularity, MethodError> {
        per_scope(ctx, |text| {
            Ok(zero_shot_predict(
                text,
                &*self.reasoner,
                &self.catalog,
                &self.config,
                self.mode,
            )?
            .ranking)
        })
    }

    fn predict_task2(
        &self,
        snippet: &str,
        _language: Language,
    ) -> Result<Task2Prediction, MethodError> {
        zero_shot_predict(
            snippet,
            &*self.reasoner,
            &self.catalog,
            &self.config,
            self.mode,
        )
    }
}

pub struct RagMethod {
    reasoner: Arc<dyn Reasoner>,
    catalog: Arc<ArticleCatalog>,
    kb: Arc<KnowledgeBase>,
    config: InferenceConfig,
    top_n: usize,
    mode: ParseMode,
}

impl RagMethod {
    pub fn new(
        reasoner: Arc<dyn Reasoner>,
        catalog: Arc<ArticleCatalog>,
        kb: Arc<KnowledgeBase>,
        config: InferenceConfig,
        top_n: usize,
    ) -> Self {
        Self {
            reasoner,
            catalog,
            kb,
            config,
            top_n,
            mode: ParseMode::Strict,
        }
    }

    pub fn with_parse_mode(mut self, mode: ParseMode) -> Self {
        self.mode = mode;
        self
    }
}

pub fn rag_predict(
    snippet: &str,
    kb: &KnowledgeBase,
    reasoner: &dyn Reasoner,
    catalog: &ArticleCatalog,
    config: &InferenceConfig,
    top_n: usize,
    mode: ParseMode,
) -> Result<Task2Prediction, MethodError> {
    let (p, raw) = ask(
        reasoner,
        render_rag_prompt(snippet, catalog, kb, top_n),
        config,
        mode,
    )?;
    Ok(Task2Prediction {
        labels: p.labels,
        ranking: p.ranking,
        raw: Some(raw),
        trace: None,
    })
}

impl Method for RagMethod {
    fn name(&self) -> &str {
        "rag"
    }

    fn predict_task1(&self, ctx: &FileContext) -> Result<MultiGranularity, MethodError> {
        per_scope(ctx, |text| {
            Ok(rag_predict(
                text,
                &self.kb,
                &*self.reasoner,
                &self.catalog,
                &self.config,
                self.top_n,
                self.mode,
            )?
            .ranking)
        })
    }

    fn predict_task2(
        &self,
        snippet: &str,
        _language: Language,
    ) -> Result<Task2Prediction, MethodError> {
        rag_predict(
            snippet,
            &self.kb,
            &*self.reasoner,
            &self.catalog,
            &self.config,
            self.top_n,
            self.mode,
        )
    }
}

pub struct ReactMethod {
    reasoner: Arc<dyn Reasoner>,
    toolbox: Toolbox,
    config: InferenceConfig,
    max_iterations: usize,
}

impl ReactMethod {
    pub fn new(
        reasoner: Arc<dyn Reasoner>,
        toolbox: Toolbox,
        config: InferenceConfig,
        max_iterations: usize,
    ) -> Self {
        Self {
            reasoner,
            toolbox,
            config,
            max_iterations,
        }
    }

    fn run(
        &self,
        snippet: &str,
        language: Language,
    ) -> Result<(ParsedOutput, AgentTrace), MethodError> {
        react_run(
            snippet,
            language,
            &self.toolbox,
            &*self.reasoner,
            &self.config,
            self.max_iterations,
        )
    }
}

impl Method for ReactMethod {
    fn name(&self) -> &str {
        "react"
    }

    fn predict_task1(&self, ctx: &FileContext) -> Result<MultiGranularity, MethodError> {
        per_scope(ctx, |text| Ok(self.run(text, ctx.language)?.0.ranking))
    }

    fn predict_task2(
        &self,
        snippet: &str,
        language: Language,
    ) -> Result<Task2Prediction, MethodError> {
        let (p, trace) = self.run(snippet, language)?;
        Ok(Task2Prediction {
            labels: p.labels,
            ranking: p.ranking,
            raw: trace.steps.last().map(|s| s.tool_input.clone()),
            trace: Some(trace),
        })
    }
}
