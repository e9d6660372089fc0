//! End-to-end runs: a task dataset and a method in, predictions, a manifest,
//! metrics and a report out.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{detect_language, load_corpus, CorpusError, SpanRef, ViolationRecord};
use crate::engine::{load_rules, EngineError, FormalAnalyzer, RankedPrediction, RuleCatalog};
use crate::facts::FactExtractor;
use crate::knowledge::{build_kb, ArticleCatalog, KnowledgeBase, KnowledgeError};
use crate::methods::reasoner::{API_KEY_VAR, ENDPOINT_VAR};
use crate::methods::{
    CachedReasoner, FileContext, FnReasoner, FormalMethod, HttpReasoner, InferenceConfig, LabelSet,
    Method, MethodError, MethodKind, ParseMode, RagMethod, ReactMethod, Reasoner, ReasonerError,
    ResponseCache, Toolbox, ZeroShotMethod,
};
use crate::metrics::{
    classification_report, ranking_report, Granularity, LabeledInstance, MetricsError,
    MetricsReport, RankedInstance, Universe,
};
use crate::par;
use crate::taskgen::{
    build_task1, build_task2, record_file, records_for_file, Task1Entry, Task2Entry,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset {path}: {reason}")]
    Dataset { path: String, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Method(#[from] MethodError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("replay cache is missing {} response(s): {}", keys.len(), keys.join(", "))]
    CacheMisses { keys: Vec<String> },
    #[error("predictions do not match the dataset; orphans: [{}], missing: [{}]", orphans.join(", "), missing.join(", "))]
    Reconciliation {
        orphans: Vec<String>,
        missing: Vec<String>,
    },
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

pub fn fingerprint(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    format!(
        "sha256:{}",
        d.iter().map(|b| format!("{b:02x}")).collect::<String>()
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    Live,
    CacheReplay,
    #[default]
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonerConfig {
    pub binding: Binding,
    pub model: String,
    /// Cache namespace; defaults to `http-<model>` for live and replay bindings.
    pub id: Option<String>,
    pub endpoint: Option<String>,
    /// Fixed answer of the stub binding.
    pub stub_response: String,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        Self {
            binding: Binding::Stub,
            model: "stub".into(),
            id: None,
            endpoint: None,
            stub_response: "0".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbOptions {
    pub top_n: usize,
    /// Previously exported knowledge base to load instead of building one.
    pub import: Option<PathBuf>,
}

impl Default for KbOptions {
    fn default() -> Self {
        Self {
            top_n: 3,
            import: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniverseChoice {
    #[default]
    GroundTruth,
    Catalog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<u8>,
    pub method: Option<MethodKind>,
    /// Task dataset as written by `gen-task1`/`gen-task2`. When absent the
    /// dataset is built from `corpus`.
    pub dataset: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// Checked-out repositories laid out as `<repo_root>/<app_name>/<file_path>`.
    pub repo_root: Option<PathBuf>,
    pub rules: Option<PathBuf>,
    pub articles: Option<PathBuf>,
    pub reasoner: ReasonerConfig,
    pub kb: KbOptions,
    pub max_iterations: usize,
    pub inference: InferenceConfig,
    pub parse_mode: Option<ParseMode>,
    pub universe: UniverseChoice,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            method: None,
            dataset: None,
            corpus: None,
            repo_root: None,
            rules: None,
            articles: None,
            reasoner: ReasonerConfig::default(),
            kb: KbOptions::default(),
            max_iterations: 8,
            inference: InferenceConfig::default(),
            parse_mode: None,
            universe: UniverseChoice::GroundTruth,
            output_dir: None,
        }
    }
}

impl RunConfig {
    /// Reads TOML (`.toml`) or JSON; relative paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = read(path)?;
        let is_toml = path.extension().is_some_and(|e| e == "toml");
        let mut cfg = Self::parse(&text, is_toml)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn parse(text: &str, toml_format: bool) -> Result<Self, HarnessError> {
        if toml_format {
            toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
        } else {
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.corpus);
        fix(&mut self.repo_root);
        fix(&mut self.rules);
        fix(&mut self.articles);
        fix(&mut self.kb.import);
        fix(&mut self.output_dir);
        fix(&mut self.inference.cache_dir);
    }

    pub fn task(&self) -> Result<u8, HarnessError> {
        match self.task {
            Some(t @ (1 | 2)) => Ok(t),
            Some(t) => Err(HarnessError::Config(format!(
                "task must be 1 or 2, got {t}"
            ))),
            None => Err(HarnessError::Config("no task given".into())),
        }
    }

    pub fn method(&self) -> Result<MethodKind, HarnessError> {
        self.method
            .ok_or_else(|| HarnessError::Config("no method given".into()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.task()?;
        let method = self.method()?;
        self.inference.validate()?;
        if self.dataset.is_none() && self.corpus.is_none() {
            return Err(HarnessError::Config(
                "either `dataset` or `corpus` is required".into(),
            ));
        }
        if method.needs_reasoner() {
            match self.reasoner.binding {
                Binding::Live
                    if self.reasoner.endpoint.is_none() && std::env::var(ENDPOINT_VAR).is_err() =>
                {
                    return Err(HarnessError::Config(format!(
                        "live binding needs `reasoner.endpoint` or {ENDPOINT_VAR}"
                    )))
                }
                Binding::CacheReplay if self.inference.cache_dir.is_none() => {
                    return Err(HarnessError::Config(
                        "cache_replay binding needs `inference.cache_dir`".into(),
                    ))
                }
                _ => {}
            }
            if method == MethodKind::React && self.max_iterations == 0 {
                return Err(HarnessError::Config(
                    "max_iterations must be at least 1".into(),
                ));
            }
            if method == MethodKind::Rag && self.kb.top_n == 0 {
                return Err(HarnessError::Config("kb.top_n must be at least 1".into()));
            }
        }
        Ok(())
    }

    fn universe(&self, catalog: &ArticleCatalog) -> Universe {
        match self.universe {
            UniverseChoice::GroundTruth => Universe::GroundTruth,
            UniverseChoice::Catalog => Universe::Fixed(catalog.numbers()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dataset {
    Task1(Vec<Task1Entry>),
    Task2(Vec<Task2Entry>),
}

/// One scored unit: a Task 1 scope or a Task 2 snippet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub id: String,
    pub granularity: Option<Granularity>,
    pub labels: BTreeSet<u32>,
}

pub fn entry_id(task: u8, index: usize) -> String {
    format!("t{task}-{index:04}")
}

fn span_key(s: SpanRef) -> String {
    format!("{}-{}", s.start_line, s.end_line)
}

impl Dataset {
    pub fn task(&self) -> u8 {
        match self {
            Dataset::Task1(_) => 1,
            Dataset::Task2(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Task1(e) => e.len(),
            Dataset::Task2(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(path: &Path, task: u8) -> Result<(Self, String), HarnessError> {
        let text = read(path)?;
        let bad = |e: serde_json::Error| HarnessError::Dataset {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let ds = match task {
            1 => Dataset::Task1(serde_json::from_str(&text).map_err(bad)?),
            _ => Dataset::Task2(serde_json::from_str(&text).map_err(bad)?),
        };
        Ok((ds, fingerprint(text.as_bytes())))
    }

    pub fn from_corpus(corpus: &[ViolationRecord], task: u8) -> Self {
        match task {
            1 => Dataset::Task1(build_task1(corpus).entries),
            _ => Dataset::Task2(build_task2(corpus).entries),
        }
    }

    /// Scored units in dataset order.
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        let mut out = Vec::new();
        match self {
            Dataset::Task1(entries) => {
                for (i, e) in entries.iter().enumerate() {
                    let id = entry_id(1, i);
                    out.push(GroundTruth {
                        id: format!("{id}/file"),
                        granularity: Some(Granularity::File),
                        labels: e.file_level.clone(),
                    });
                    for (name, labels) in &e.module_level {
                        out.push(GroundTruth {
                            id: format!("{id}/module/{name}"),
                            granularity: Some(Granularity::Module),
                            labels: labels.clone(),
                        });
                    }
                    for lv in &e.line_level {
                        out.push(GroundTruth {
                            id: format!("{id}/line/{}", span_key(lv.span)),
                            granularity: Some(Granularity::Line),
                            labels: lv.articles.clone(),
                        });
                    }
                }
            }
            Dataset::Task2(entries) => {
                for (i, e) in entries.iter().enumerate() {
                    out.push(GroundTruth {
                        id: entry_id(2, i),
                        granularity: None,
                        labels: e.violated_articles.iter().copied().collect(),
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    /// Ranked articles (Task 1) or the ascending label set (Task 2).
    pub articles: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionsFile {
    pub task: u8,
    pub method: String,
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Scored,
    Errored,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub id: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub total: usize,
    pub scored: usize,
    pub errored: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub task: u8,
    pub method: String,
    pub config: serde_json::Value,
    pub fingerprints: BTreeMap<String, String>,
    pub instances: Vec<InstanceOutcome>,
    pub counts: OutcomeCounts,
    pub timings: Timings,
}

impl RunManifest {
    /// The manifest with timings zeroed, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: Timings::default(),
            ..self.clone()
        }
    }
}

pub struct RunOutput {
    pub predictions: PredictionsFile,
    pub manifest: RunManifest,
    pub dataset: Dataset,
    pub catalog: Arc<ArticleCatalog>,
}

fn load_optional_corpus(
    cfg: &RunConfig,
    prints: &mut BTreeMap<String, String>,
) -> Result<Option<Vec<ViolationRecord>>, HarnessError> {
    match &cfg.corpus {
        None => Ok(None),
        Some(p) => {
            let text = read(p)?;
            prints.insert("corpus".into(), fingerprint(text.as_bytes()));
            Ok(Some(load_corpus(p)?))
        }
    }
}

fn build_analyzer(
    cfg: &RunConfig,
    prints: &mut BTreeMap<String, String>,
) -> Result<FormalAnalyzer, HarnessError> {
    let catalog = match &cfg.rules {
        Some(p) => {
            prints.insert("rules".into(), fingerprint(read(p)?.as_bytes()));
            Arc::new(load_rules(p)?)
        }
        None => RuleCatalog::builtin(),
    };
    Ok(FormalAnalyzer::new(FactExtractor::default(), catalog))
}

fn build_reasoner(cfg: &RunConfig) -> Result<Arc<dyn Reasoner>, HarnessError> {
    let rc = &cfg.reasoner;
    let cache = cfg.inference.cache_dir.as_ref().map(ResponseCache::new);
    let default_id = || {
        rc.id
            .clone()
            .unwrap_or_else(|| format!("http-{}", rc.model))
    };
    let base: Box<dyn Reasoner> = match rc.binding {
        Binding::CacheReplay => {
            let cache = cache.ok_or_else(|| {
                HarnessError::Config("cache_replay needs inference.cache_dir".into())
            })?;
            return Ok(Arc::new(CachedReasoner::replay(default_id(), cache)));
        }
        Binding::Stub => {
            let answer = rc.stub_response.clone();
            let id = rc.id.clone().unwrap_or_else(|| "stub".into());
            Box::new(FnReasoner::new(id, move |_| Ok(answer.clone())))
        }
        Binding::Live => {
            let endpoint = match &rc.endpoint {
                Some(e) => e.clone(),
                None => std::env::var(ENDPOINT_VAR)
                    .map_err(|_| HarnessError::Config(format!("{ENDPOINT_VAR} is not set")))?,
            };
            let mut r =
                HttpReasoner::new(endpoint, rc.model.clone(), std::env::var(API_KEY_VAR).ok());
            if let Some(id) = &rc.id {
                r = r.with_id(id.clone());
            }
            Box::new(r)
        }
    };
    Ok(match cache {
        Some(c) => Arc::new(CachedReasoner::new(base, c)),
        None => Arc::from(base),
    })
}

/// Assembles the configured method.
pub fn build_method(
    cfg: &RunConfig,
    corpus: Option<&[ViolationRecord]>,
    analyzer: FormalAnalyzer,
    catalog: Arc<ArticleCatalog>,
) -> Result<Box<dyn Method>, HarnessError> {
    let kind = cfg.method()?;
    if kind == MethodKind::Formal {
        return Ok(Box::new(FormalMethod::new(analyzer)));
    }
    let reasoner = build_reasoner(cfg)?;
    let inference = cfg.inference.clone();
    Ok(match kind {
        MethodKind::Formal => unreachable!(),
        MethodKind::ZeroShot => Box::new(
            ZeroShotMethod::new(reasoner, catalog, inference)
                .with_parse_mode(cfg.parse_mode.unwrap_or(ParseMode::Strict)),
        ),
        MethodKind::Rag => {
            let kb = match &cfg.kb.import {
                Some(p) => KnowledgeBase::from_json(&read(p)?)?,
                None => build_kb(corpus.unwrap_or(&[]), &catalog),
            };
            Box::new(
                RagMethod::new(reasoner, catalog, Arc::new(kb), inference, cfg.kb.top_n)
                    .with_parse_mode(cfg.parse_mode.unwrap_or(ParseMode::Strict)),
            )
        }
        MethodKind::React => Box::new(ReactMethod::new(
            reasoner,
            Toolbox::new(catalog, analyzer),
            inference,
            cfg.max_iterations,
        )),
    })
}

/// File text for a Task 1 entry: the checked-out file when available,
/// otherwise the corpus snippets laid out on their recorded lines.
pub fn entry_source(
    entry: &Task1Entry,
    repo_root: Option<&Path>,
    corpus: Option<&[ViolationRecord]>,
) -> Option<String> {
    if let Some(root) = repo_root {
        let p = root.join(&entry.app_name).join(&entry.file_path);
        if let Ok(text) = std::fs::read_to_string(&p) {
            return Some(text);
        }
    }
    let records = records_for_file(corpus?, entry);
    if records.is_empty() {
        return None;
    }
    Some(reconstruct_source(&records))
}

/// Places each snippet on its span; span-less snippets follow the last line.
pub fn reconstruct_source(records: &[&ViolationRecord]) -> String {
    let mut lines: Vec<String> = Vec::new();
    let mut floating = Vec::new();
    for r in records {
        match record_file(r).1 {
            Some(span) => {
                if lines.len() < span.end_line {
                    lines.resize(span.end_line, String::new());
                }
                for (offset, text) in r.code_snippet.lines().take(span.line_count()).enumerate() {
                    let slot = &mut lines[span.start_line - 1 + offset];
                    if slot.is_empty() {
                        *slot = text.to_string();
                    }
                }
            }
            None => floating.push(r.code_snippet.as_str()),
        }
    }
    for snippet in floating {
        lines.extend(snippet.lines().map(str::to_string));
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

fn cache_miss_key(e: &MethodError) -> Option<String> {
    match e {
        MethodError::Reasoner(ReasonerError::CacheMiss { key, .. }) => Some(key.clone()),
        MethodError::Agent {
            source: ReasonerError::CacheMiss { key, .. },
            ..
        } => Some(key.clone()),
        _ => None,
    }
}

struct EntryResult {
    predictions: Vec<Prediction>,
    outcome: InstanceOutcome,
    miss: Option<String>,
}

fn task1_entry(
    i: usize,
    entry: &Task1Entry,
    method: &dyn Method,
    analyzer: &FormalAnalyzer,
    cfg: &RunConfig,
    corpus: Option<&[ViolationRecord]>,
) -> EntryResult {
    let id = entry_id(1, i);
    let empty_all = |status: Status, reason: String, miss: Option<String>| EntryResult {
        predictions: scopes_of(&id, entry, None),
        outcome: InstanceOutcome {
            id: id.clone(),
            status,
            reason: Some(reason),
        },
        miss,
    };
    let Some(source) = entry_source(entry, cfg.repo_root.as_deref(), corpus) else {
        return empty_all(Status::Skipped, "no source text available".into(), None);
    };
    let language = detect_language(&entry.file_path);
    let names: BTreeSet<String> = entry.module_level.keys().cloned().collect();
    let ctx = FileContext {
        file_path: entry.file_path.clone(),
        language,
        modules: analyzer.module_ranges(&source, language, &names),
        lines: entry.line_level.iter().map(|l| l.span).collect(),
        source,
    };
    match method.predict_task1(&ctx) {
        Ok(mg) => EntryResult {
            predictions: scopes_of(&id, entry, Some(&mg)),
            outcome: InstanceOutcome {
                id,
                status: Status::Scored,
                reason: None,
            },
            miss: None,
        },
        Err(e) => empty_all(Status::Errored, e.to_string(), cache_miss_key(&e)),
    }
}

fn scopes_of(
    id: &str,
    entry: &Task1Entry,
    mg: Option<&crate::engine::MultiGranularity>,
) -> Vec<Prediction> {
    let ranked = |r: Option<&RankedPrediction>| r.map(|r| r.articles.clone()).unwrap_or_default();
    let mut out = vec![Prediction {
        instance_id: format!("{id}/file"),
        granularity: Some(Granularity::File),
        articles: ranked(mg.map(|m| &m.file)),
    }];
    for name in entry.module_level.keys() {
        out.push(Prediction {
            instance_id: format!("{id}/module/{name}"),
            granularity: Some(Granularity::Module),
            articles: ranked(mg.and_then(|m| m.modules.get(name))),
        });
    }
    for (j, lv) in entry.line_level.iter().enumerate() {
        out.push(Prediction {
            instance_id: format!("{id}/line/{}", span_key(lv.span)),
            granularity: Some(Granularity::Line),
            articles: ranked(mg.and_then(|m| m.lines.get(j)).map(|(_, r)| r)),
        });
    }
    out
}

fn task2_entry(i: usize, entry: &Task2Entry, method: &dyn Method) -> EntryResult {
    let id = entry_id(2, i);
    let (path, _) = crate::corpus::parse_span(&entry.code_snippet_path)
        .unwrap_or_else(|_| (entry.code_snippet_path.clone(), None));
    let language = detect_language(&path);
    let (articles, outcome, miss) = match method.predict_task2(&entry.code_snippet, language) {
        Ok(p) => (
            p.labels.0.into_iter().collect(),
            InstanceOutcome {
                id: id.clone(),
                status: Status::Scored,
                reason: None,
            },
            None,
        ),
        Err(e) => (
            Vec::new(),
            InstanceOutcome {
                id: id.clone(),
                status: Status::Errored,
                reason: Some(e.to_string()),
            },
            cache_miss_key(&e),
        ),
    };
    EntryResult {
        predictions: vec![Prediction {
            instance_id: id,
            granularity: None,
            articles,
        }],
        outcome,
        miss,
    }
}

/// Runs the configured method over every dataset entry.
///
/// Method failures on single entries are recorded in the manifest and scored
/// as empty predictions. A replay binding that misses the cache is fatal.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let started_unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let task = cfg.task()?;
    let kind = cfg.method()?;
    let mut prints = BTreeMap::new();

    let corpus = load_optional_corpus(cfg, &mut prints)?;
    let dataset = match &cfg.dataset {
        Some(p) => {
            let (ds, fp) = Dataset::load(p, task)?;
            prints.insert("dataset".into(), fp);
            ds
        }
        None => Dataset::from_corpus(corpus.as_deref().unwrap_or(&[]), task),
    };
    let catalog = match &cfg.articles {
        Some(p) => {
            prints.insert("articles".into(), fingerprint(read(p)?.as_bytes()));
            Arc::new(ArticleCatalog::load(p)?)
        }
        None => ArticleCatalog::builtin(),
    };
    let analyzer = build_analyzer(cfg, &mut prints)?;
    let method = build_method(cfg, corpus.as_deref(), analyzer.clone(), catalog.clone())?;
    let method = &*method;

    let results: Vec<EntryResult> = par::install(cfg.inference.parallelism, || match &dataset {
        Dataset::Task1(entries) => {
            let idx: Vec<usize> = (0..entries.len()).collect();
            par::map(&idx, |&i| {
                task1_entry(i, &entries[i], method, &analyzer, cfg, corpus.as_deref())
            })
        }
        Dataset::Task2(entries) => {
            let idx: Vec<usize> = (0..entries.len()).collect();
            par::map(&idx, |&i| task2_entry(i, &entries[i], method))
        }
    });

    if cfg.reasoner.binding == Binding::CacheReplay && kind.needs_reasoner() {
        let keys: BTreeSet<String> = results.iter().filter_map(|r| r.miss.clone()).collect();
        if !keys.is_empty() {
            return Err(HarnessError::CacheMisses {
                keys: keys.into_iter().collect(),
            });
        }
    }

    let mut counts = OutcomeCounts {
        total: results.len(),
        ..Default::default()
    };
    let mut predictions = Vec::new();
    let mut instances = Vec::new();
    for r in results {
        match r.outcome.status {
            Status::Scored => counts.scored += 1,
            Status::Errored => counts.errored += 1,
            Status::Skipped => counts.skipped += 1,
        }
        if let Some(reason) = &r.outcome.reason {
            log::warn!("{}: {reason}", r.outcome.id);
        }
        predictions.extend(r.predictions);
        instances.push(r.outcome);
    }
    let manifest = RunManifest {
        task,
        method: kind.to_string(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        fingerprints: prints,
        instances,
        counts,
        timings: Timings {
            started_unix_ms,
            elapsed_ms: started.elapsed().as_millis(),
        },
    };
    Ok(RunOutput {
        predictions: PredictionsFile {
            task,
            method: kind.to_string(),
            predictions,
        },
        manifest,
        dataset,
        catalog,
    })
}

/// Joins predictions to the dataset by instance id and scores them.
pub fn evaluate(
    predictions: &PredictionsFile,
    dataset: &Dataset,
    universe: &Universe,
) -> Result<MetricsReport, HarnessError> {
    let truth = dataset.ground_truth();
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    let mut orphans = Vec::new();
    let known: BTreeSet<&str> = truth.iter().map(|t| t.id.as_str()).collect();
    for p in &predictions.predictions {
        if !known.contains(p.instance_id.as_str()) || by_id.insert(&p.instance_id, p).is_some() {
            orphans.push(p.instance_id.clone());
        }
    }
    let missing: Vec<String> = truth
        .iter()
        .filter(|t| !by_id.contains_key(t.id.as_str()))
        .map(|t| t.id.clone())
        .collect();
    if !orphans.is_empty() || !missing.is_empty() || predictions.task != dataset.task() {
        if orphans.is_empty() && missing.is_empty() {
            return Err(HarnessError::Config(format!(
                "predictions are for task {}, dataset is task {}",
                predictions.task,
                dataset.task()
            )));
        }
        return Err(HarnessError::Reconciliation { orphans, missing });
    }

    let mut report = MetricsReport {
        task: dataset.task(),
        method: predictions.method.clone(),
        n_instances: truth.len(),
        ranking: Vec::new(),
        classification: None,
    };
    match dataset {
        Dataset::Task1(_) => {
            let instances: Vec<RankedInstance> = truth
                .iter()
                .map(|t| RankedInstance {
                    granularity: t.granularity.expect("task 1 instances carry a granularity"),
                    prediction: RankedPrediction::from_ordered(
                        by_id[t.id.as_str()].articles.iter().copied(),
                    ),
                    ground_truth: t.labels.clone(),
                })
                .collect();
            for g in Granularity::ALL {
                if instances.iter().any(|i| i.granularity == g) {
                    report.ranking.push(ranking_report(&instances, g)?);
                }
            }
        }
        Dataset::Task2(_) => {
            let instances: Vec<LabeledInstance> = truth
                .iter()
                .map(|t| LabeledInstance {
                    prediction: LabelSet::new(by_id[t.id.as_str()].articles.iter().copied()),
                    ground_truth: LabelSet::new(t.labels.iter().copied()),
                })
                .collect();
            report.classification = Some(classification_report(&instances, universe)?);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Structured,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "structured" | "json" => Ok(Self::Structured),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(format!(
                "unknown report format `{s}` (expected structured, csv or markdown)"
            )),
        }
    }
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn title_case(g: Granularity) -> &'static str {
    match g {
        Granularity::File => "File",
        Granularity::Module => "Module",
        Granularity::Line => "Line",
    }
}

/// Renders a report; identical reports give identical bytes.
pub fn emit_report(report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Structured => {
            serde_json::to_string_pretty(report).expect("report serializes") + "\n"
        }
        ReportFormat::Csv => {
            let mut out = String::new();
            if !report.ranking.is_empty() {
                out.push_str("method,granularity,n,acc@1,acc@2,acc@3,acc@4,acc@5\n");
                for r in &report.ranking {
                    let accs: Vec<String> = r.acc_at.values().map(|v| f4(*v)).collect();
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        report.method,
                        r.granularity,
                        r.n_instances,
                        accs.join(",")
                    ));
                }
            }
            if let Some(c) = &report.classification {
                out.push_str("method,n,accuracy,macro_precision,macro_recall,macro_f1\n");
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    report.method,
                    c.n_instances,
                    f4(c.accuracy),
                    f4(c.macro_precision),
                    f4(c.macro_recall),
                    f4(c.macro_f1)
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            for r in &report.ranking {
                out.push_str(&format!(
                    "### {}-level Accuracy@k (n = {})\n\n",
                    title_case(r.granularity),
                    r.n_instances
                ));
                out.push_str("| Method | @1 | @2 | @3 | @4 | @5 |\n|---|---|---|---|---|---|\n");
                let accs: Vec<String> = r.acc_at.values().map(|v| f4(*v)).collect();
                out.push_str(&format!("| {} | {} |\n\n", report.method, accs.join(" | ")));
            }
            if let Some(c) = &report.classification {
                out.push_str(&format!(
                    "### Multi-label classification (n = {}, universe = {} articles, {})\n\n",
                    c.n_instances,
                    c.article_universe.len(),
                    c.universe_mode
                ));
                out.push_str("| Method | Accuracy | Macro-Precision | Macro-Recall | Macro-F1 |\n|---|---|---|---|---|\n");
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} |\n\n",
                    report.method,
                    f4(c.accuracy),
                    f4(c.macro_precision),
                    f4(c.macro_recall),
                    f4(c.macro_f1)
                ));
            }
            out
        }
    }
}

/// Files written by [`write_outputs`].
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.md";

/// Scores a finished run and writes predictions, manifest, metrics and the markdown report.
pub fn write_outputs(
    out: &RunOutput,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<MetricsReport, HarnessError> {
    let report = evaluate(&out.predictions, &out.dataset, &cfg.universe(&out.catalog))?;
    write(
        &dir.join(PREDICTIONS_FILE),
        &(serde_json::to_string_pretty(&out.predictions).expect("predictions serialize") + "\n"),
    )?;
    write(
        &dir.join(MANIFEST_FILE),
        &(serde_json::to_string_pretty(&out.manifest).expect("manifest serializes") + "\n"),
    )?;
    write(
        &dir.join(METRICS_FILE),
        &emit_report(&report, ReportFormat::Structured),
    )?;
    write(
        &dir.join(REPORT_FILE),
        &emit_report(&report, ReportFormat::Markdown),
    )?;
    Ok(report)
}

/// Universe for a standalone `evaluate` call.
pub fn universe_for(choice: UniverseChoice, catalog: &ArticleCatalog) -> Universe {
    match choice {
        UniverseChoice::GroundTruth => Universe::GroundTruth,
        UniverseChoice::Catalog => Universe::Fixed(catalog.numbers()),
    }
}

pub fn load_predictions(path: &Path) -> Result<PredictionsFile, HarnessError> {
    serde_json::from_str(&read(path)?).map_err(|e| HarnessError::Dataset {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_report(path: &Path) -> Result<MetricsReport, HarnessError> {
    serde_json::from_str(&read(path)?).map_err(|e| HarnessError::Dataset {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
