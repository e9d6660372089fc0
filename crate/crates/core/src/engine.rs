//! Predicate population and rule evaluation over extracted facts.
//!
//! Facts are lifted into a fixed inventory of named predicates (some
//! parameterized by [`DataCategory`]); rules are boolean expressions over those
//! atoms, each mapped to a GDPR article. A satisfied rule yields a [`Finding`],
//! and findings are folded into a ranked article list.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Language, SpanRef};
use crate::facts::{DataCategory, Fact, FactExtractor, FactKind};

mod expr;

pub use expr::{parse_expr, Expr};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("cannot read rule file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed rule file: {0}")]
    Format(String),
    #[error("rule `{rule}`: {reason}")]
    Rule { rule: String, reason: String },
    #[error("rule `{rule}` references unknown predicate `{predicate}`")]
    UnknownPredicate { rule: String, predicate: String },
    #[error("duplicate rule id `{0}`")]
    DuplicateRule(String),
    #[error("span {span} is outside the source ({lines} lines)")]
    SpanOutOfBounds { span: SpanRef, lines: usize },
}

struct PredicateDef {
    name: &'static str,
    parameterized: bool,
    /// Guard-like predicates see facts outside the focus span.
    contextual: bool,
    matches: fn(&Fact, Option<DataCategory>) -> bool,
}

fn tag_is(f: &Fact, tag: &str) -> bool {
    f.tag.as_deref() == Some(tag)
}

fn cat_matches(f: &Fact, arg: Option<DataCategory>) -> bool {
    match arg {
        Some(c) => f.data_category == Some(c),
        None => f.data_category.is_some(),
    }
}

const RECORD_KEEPING_TAGS: [&str; 3] = ["erasure", "portability", "retention"];

const INVENTORY: &[PredicateDef] = &[
    PredicateDef {
        name: "CollectsData",
        parameterized: true,
        contextual: false,
        matches: |f, arg| f.kind == FactKind::ApiCall && f.tag.is_none() && cat_matches(f, arg),
    },
    PredicateDef {
        name: "DeclaresPermission",
        parameterized: true,
        contextual: false,
        matches: |f, arg| f.kind == FactKind::PermissionDecl && cat_matches(f, arg),
    },
    PredicateDef {
        name: "HandlesData",
        parameterized: true,
        contextual: false,
        matches: |f, arg| cat_matches(f, arg),
    },
    PredicateDef {
        name: "HasConsentCheck",
        parameterized: false,
        contextual: true,
        matches: |f, _| f.kind == FactKind::ConsentGuard && f.tag.is_none(),
    },
    PredicateDef {
        name: "ShowsPrivacyNotice",
        parameterized: false,
        contextual: true,
        matches: |f, _| f.kind == FactKind::ConsentGuard && tag_is(f, "notice"),
    },
    PredicateDef {
        name: "OffersWithdrawal",
        parameterized: false,
        contextual: true,
        matches: |f, _| f.kind == FactKind::ConsentGuard && tag_is(f, "withdrawal"),
    },
    PredicateDef {
        name: "UsesEncryption",
        parameterized: false,
        contextual: true,
        matches: |f, _| f.kind == FactKind::CryptoUse && !tag_is(f, "weak_crypto"),
    },
    PredicateDef {
        name: "UsesWeakCrypto",
        parameterized: false,
        contextual: false,
        matches: |f, _| f.kind == FactKind::CryptoUse && tag_is(f, "weak_crypto"),
    },
    PredicateDef {
        name: "UsesInsecureTransport",
        parameterized: false,
        contextual: false,
        matches: |f, _| {
            (f.kind == FactKind::UrlLiteral && matches!(f.symbol.as_str(), "http" | "ws" | "ftp"))
                || (f.kind == FactKind::NetworkSend && tag_is(f, "insecure_transport"))
        },
    },
    PredicateDef {
        name: "SendsOverNetwork",
        parameterized: false,
        contextual: false,
        matches: |f, _| matches!(f.kind, FactKind::NetworkSend | FactKind::UrlLiteral),
    },
    PredicateDef {
        name: "SharesWithThirdParty",
        parameterized: false,
        contextual: false,
        matches: |f, _| tag_is(f, "third_party"),
    },
    PredicateDef {
        name: "TransfersAbroad",
        parameterized: false,
        contextual: false,
        matches: |f, _| tag_is(f, "transfer"),
    },
    PredicateDef {
        name: "WritesStorage",
        parameterized: false,
        contextual: false,
        matches: |f, _| {
            f.kind == FactKind::StorageWrite
                && !f
                    .tag
                    .as_deref()
                    .is_some_and(|t| RECORD_KEEPING_TAGS.contains(&t))
        },
    },
    PredicateDef {
        name: "WritesWorldReadable",
        parameterized: false,
        contextual: false,
        matches: |f, _| tag_is(f, "world_readable") || tag_is(f, "external_storage"),
    },
    PredicateDef {
        name: "WritesLog",
        parameterized: false,
        contextual: false,
        matches: |f, _| f.kind == FactKind::LogWrite,
    },
    PredicateDef {
        name: "HardcodedSecret",
        parameterized: false,
        contextual: false,
        matches: |f, _| {
            f.kind == FactKind::StringLiteral && f.data_category == Some(DataCategory::Credentials)
        },
    },
    PredicateDef {
        name: "StoresPlaintextCredentials",
        parameterized: false,
        contextual: false,
        matches: |f, _| {
            matches!(f.kind, FactKind::StorageWrite | FactKind::StringLiteral)
                && f.data_category == Some(DataCategory::Credentials)
        },
    },
    PredicateDef {
        name: "ProcessesSpecialCategory",
        parameterized: false,
        contextual: false,
        matches: |f, _| tag_is(f, "special_category"),
    },
    PredicateDef {
        name: "HidesAppPresence",
        parameterized: false,
        contextual: false,
        matches: |f, _| tag_is(f, "covert"),
    },
    PredicateDef {
        name: "RunsInBackground",
        parameterized: false,
        contextual: false,
        matches: |f, _| tag_is(f, "background"),
    },
    PredicateDef {
        name: "ExecutesRemoteCommands",
        parameterized: false,
        contextual: false,
        matches: |f, _| tag_is(f, "remote_exec"),
    },
    PredicateDef {
        name: "ProfilesUsers",
        parameterized: false,
        contextual: false,
        matches: |f, _| tag_is(f, "profiling"),
    },
    PredicateDef {
        name: "ProvidesErasure",
        parameterized: false,
        contextual: true,
        matches: |f, _| tag_is(f, "erasure"),
    },
    PredicateDef {
        name: "ProvidesExport",
        parameterized: false,
        contextual: true,
        matches: |f, _| tag_is(f, "portability"),
    },
    PredicateDef {
        name: "DefinesRetention",
        parameterized: false,
        contextual: true,
        matches: |f, _| tag_is(f, "retention"),
    },
];

/// `LogsSensitiveAccess` is the one composite predicate: a log write plus any
/// personal-data fact in scope.
const LOGS_SENSITIVE: &str = "LogsSensitiveAccess";

fn definition(name: &str) -> Option<&'static PredicateDef> {
    INVENTORY.iter().find(|d| d.name == name)
}

/// Every predicate name a rule may reference.
pub fn predicate_names() -> Vec<&'static str> {
    INVENTORY
        .iter()
        .map(|d| d.name)
        .chain(std::iter::once(LOGS_SENSITIVE))
        .collect()
}

fn validate_atom(name: &str, arg: Option<DataCategory>) -> Result<(), String> {
    if name == LOGS_SENSITIVE {
        return match arg {
            None => Ok(()),
            Some(_) => Err(format!("`{name}` takes no argument")),
        };
    }
    match definition(name) {
        None => Err(String::new()),
        Some(d) if !d.parameterized && arg.is_some() => Err(format!("`{name}` takes no argument")),
        Some(_) => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AtomKey {
    pub name: String,
    pub arg: Option<DataCategory>,
}

impl fmt::Display for AtomKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.arg {
            Some(c) => write!(f, "{}({})", self.name, c),
            None => f.write_str(&self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub name: String,
    pub args: Vec<DataCategory>,
    pub holds: bool,
    /// Indices into the owning [`PredicateSet`]'s facts.
    pub support: Vec<usize>,
}

/// Populated predicates together with the facts their support points at.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredicateSet {
    pub facts: Vec<Fact>,
    pub predicates: BTreeMap<AtomKey, Predicate>,
}

impl PredicateSet {
    pub fn get(&self, name: &str, arg: Option<DataCategory>) -> Option<&Predicate> {
        self.predicates.get(&AtomKey {
            name: name.to_string(),
            arg,
        })
    }

    pub fn holds(&self, name: &str, arg: Option<DataCategory>) -> bool {
        self.get(name, arg).is_some_and(|p| p.holds)
    }
}

/// Lifts facts into the predicate inventory.
///
/// Ordinary predicates only see facts inside the focus (non-contextual);
/// guard predicates such as `HasConsentCheck` see every fact.
pub fn populate_predicates(facts: &[Fact]) -> PredicateSet {
    let mut predicates = BTreeMap::new();
    for def in INVENTORY {
        let args: Vec<Option<DataCategory>> = if def.parameterized {
            std::iter::once(None)
                .chain(DataCategory::ALL.iter().copied().map(Some))
                .collect()
        } else {
            vec![None]
        };
        for arg in args {
            let support: Vec<usize> = facts
                .iter()
                .enumerate()
                .filter(|(_, f)| (def.contextual || !f.contextual) && (def.matches)(f, arg))
                .map(|(i, _)| i)
                .collect();
            predicates.insert(
                AtomKey {
                    name: def.name.to_string(),
                    arg,
                },
                Predicate {
                    name: def.name.to_string(),
                    args: arg.into_iter().collect(),
                    holds: !support.is_empty(),
                    support,
                },
            );
        }
    }

    let logs: Vec<usize> = facts
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.contextual && f.kind == FactKind::LogWrite)
        .map(|(i, _)| i)
        .collect();
    let personal: Vec<usize> = facts
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.contextual && f.data_category.is_some_and(|c| c.is_personal()))
        .map(|(i, _)| i)
        .collect();
    let holds = !logs.is_empty() && !personal.is_empty();
    let mut support = if holds {
        logs.into_iter().chain(personal).collect::<Vec<_>>()
    } else {
        Vec::new()
    };
    support.sort_unstable();
    predicates.insert(
        AtomKey {
            name: LOGS_SENSITIVE.to_string(),
            arg: None,
        },
        Predicate {
            name: LOGS_SENSITIVE.to_string(),
            args: Vec::new(),
            holds,
            support,
        },
    );

    PredicateSet {
        facts: facts.to_vec(),
        predicates,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub id: String,
    pub article: u32,
    pub expr: String,
    pub weight: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub id: String,
    pub article: u32,
    pub condition: Expr,
    pub weight: f64,
    pub message: String,
}

impl Rule {
    pub fn has_negation(&self) -> bool {
        self.condition.has_negation()
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RuleDoc {
    List(Vec<RuleSpec>),
    Versioned { version: u32, rules: Vec<RuleSpec> },
}

/// Immutable rule set.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleCatalog {
    rules: Vec<Rule>,
    version: Option<u32>,
}

const DEFAULT_RULES: &str = include_str!("../data/rules.json");

impl RuleCatalog {
    pub fn builtin() -> Arc<RuleCatalog> {
        static CATALOG: OnceLock<Arc<RuleCatalog>> = OnceLock::new();
        CATALOG
            .get_or_init(|| Arc::new(parse_rules(DEFAULT_RULES).expect("bundled rule catalog")))
            .clone()
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn version(&self) -> Option<u32> {
        self.version
    }

    pub fn articles(&self) -> BTreeSet<u32> {
        self.rules.iter().map(|r| r.article).collect()
    }
}

pub fn parse_rules(text: &str) -> Result<RuleCatalog, EngineError> {
    if text.trim().is_empty() {
        return Ok(RuleCatalog {
            rules: Vec::new(),
            version: None,
        });
    }
    let doc: RuleDoc =
        serde_json::from_str(text).map_err(|e| EngineError::Format(e.to_string()))?;
    let (specs, version) = match doc {
        RuleDoc::List(r) => (r, None),
        RuleDoc::Versioned { version, rules } => (rules, Some(version)),
    };
    let mut seen = HashSet::new();
    let mut rules = Vec::with_capacity(specs.len());
    for spec in specs {
        if !seen.insert(spec.id.clone()) {
            return Err(EngineError::DuplicateRule(spec.id));
        }
        let rule_err = |reason: String| EngineError::Rule {
            rule: spec.id.clone(),
            reason,
        };
        if spec.article < 1 {
            return Err(rule_err("article numbers start at 1".into()));
        }
        if !(spec.weight > 0.0 && spec.weight <= 1.0) {
            return Err(rule_err(format!("weight {} outside (0, 1]", spec.weight)));
        }
        let condition = parse_expr(&spec.expr).map_err(rule_err)?;
        for (name, arg) in condition.atoms() {
            if let Err(reason) = validate_atom(name, arg) {
                return Err(if reason.is_empty() {
                    EngineError::UnknownPredicate {
                        rule: spec.id.clone(),
                        predicate: name.to_string(),
                    }
                } else {
                    rule_err(reason)
                });
            }
        }
        rules.push(Rule {
            id: spec.id,
            article: spec.article,
            condition,
            weight: spec.weight,
            message: spec.message,
        });
    }
    Ok(RuleCatalog { rules, version })
}

pub fn load_rules(path: impl AsRef<Path>) -> Result<RuleCatalog, EngineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EngineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_rules(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub article: u32,
    pub rule_id: String,
    pub confidence: f64,
    pub spans: Vec<SpanRef>,
    pub explanation: String,
}

/// Ordered distinct articles, most confident first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedPrediction {
    pub articles: Vec<u32>,
}

impl RankedPrediction {
    /// Keeps the first occurrence of each article.
    pub fn from_ordered(items: impl IntoIterator<Item = u32>) -> Self {
        let mut seen = HashSet::new();
        Self {
            articles: items.into_iter().filter(|a| seen.insert(*a)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }
}

fn render_message(template: &str, article: u32, spans: &[SpanRef], symbols: &[&str]) -> String {
    let list = spans
        .iter()
        .map(|s| {
            if s.is_single_line() {
                s.start_line.to_string()
            } else {
                format!("{}-{}", s.start_line, s.end_line)
            }
        })
        .collect::<Vec<_>>()
        .join(", ");
    let lines = match spans {
        [] => "no lines".to_string(),
        [s] if s.is_single_line() => format!("line {list}"),
        _ => format!("lines {list}"),
    };
    template
        .replace("{article}", &article.to_string())
        .replace("{lines}", &lines)
        .replace("{symbols}", &symbols.join(", "))
}

/// One finding per satisfied rule, in catalog order.
///
/// Confidence is `weight * (1 + ln(1 + n))` where `n` counts the distinct
/// facts supporting the rule's positively used, satisfied atoms.
pub fn evaluate_rules(catalog: &RuleCatalog, predicates: &PredicateSet) -> Vec<Finding> {
    let mut findings = Vec::new();
    for rule in catalog.rules() {
        if !rule
            .condition
            .eval(&|name, arg| predicates.holds(name, arg))
        {
            continue;
        }
        let mut support = BTreeSet::new();
        rule.condition.positive_support(
            &|name, arg| predicates.holds(name, arg),
            &mut |name, arg| {
                if let Some(p) = predicates.get(name, arg) {
                    support.extend(p.support.iter().copied());
                }
            },
        );
        let supporting: Vec<&Fact> = support.iter().map(|&i| &predicates.facts[i]).collect();
        let spans: Vec<SpanRef> = supporting
            .iter()
            .map(|f| f.span)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let symbols: Vec<&str> = supporting
            .iter()
            .map(|f| f.symbol.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let confidence = rule.weight * (1.0 + (1.0 + support.len() as f64).ln());
        findings.push(Finding {
            article: rule.article,
            rule_id: rule.id.clone(),
            confidence,
            explanation: render_message(&rule.message, rule.article, &spans, &symbols),
            spans,
        });
    }
    findings
}

/// Articles by their best finding's confidence; ties go to the lower article.
pub fn rank_articles(findings: &[Finding]) -> RankedPrediction {
    let mut best: BTreeMap<u32, f64> = BTreeMap::new();
    for f in findings {
        let slot = best.entry(f.article).or_insert(f.confidence);
        if f.confidence > *slot {
            *slot = f.confidence;
        }
    }
    let mut scored: Vec<(u32, f64)> = best.into_iter().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    RankedPrediction {
        articles: scored.into_iter().map(|(a, _)| a).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Analysis {
    pub facts: Vec<Fact>,
    pub findings: Vec<Finding>,
    pub ranking: RankedPrediction,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MultiGranularity {
    pub file: RankedPrediction,
    pub modules: BTreeMap<String, RankedPrediction>,
    pub lines: Vec<(SpanRef, RankedPrediction)>,
}

/// Extractor plus catalog: the complete rule-based detector.
#[derive(Clone)]
pub struct FormalAnalyzer {
    extractor: FactExtractor,
    catalog: Arc<RuleCatalog>,
}

impl Default for FormalAnalyzer {
    fn default() -> Self {
        Self::new(FactExtractor::default(), RuleCatalog::builtin())
    }
}

fn line_count(source: &str) -> usize {
    source.lines().count().max(1)
}

impl FormalAnalyzer {
    pub fn new(extractor: FactExtractor, catalog: Arc<RuleCatalog>) -> Self {
        Self { extractor, catalog }
    }

    pub fn catalog(&self) -> &RuleCatalog {
        &self.catalog
    }

    pub fn extractor(&self) -> &FactExtractor {
        &self.extractor
    }

    fn run(&self, facts: Vec<Fact>) -> Analysis {
        let predicates = populate_predicates(&facts);
        let findings = evaluate_rules(&self.catalog, &predicates);
        let ranking = rank_articles(&findings);
        Analysis {
            facts,
            findings,
            ranking,
        }
    }

    /// Whole-source analysis, or focus analysis with file-wide guards.
    pub fn analyze(&self, source: &str, language: Language, focus: Option<SpanRef>) -> Analysis {
        self.run(self.extractor.extract_facts(source, language, focus))
    }

    /// Analysis restricted to the facts inside `range`, without imported guards.
    pub fn analyze_range(&self, source: &str, language: Language, range: SpanRef) -> Analysis {
        let facts = self
            .extractor
            .extract_facts(source, language, None)
            .into_iter()
            .filter(|f| range.contains(&f.span))
            .collect();
        self.run(facts)
    }

    /// Rankings at file, module and line scope.
    ///
    /// Module scope sees only facts inside the module's line range. Line scope
    /// sees facts inside the span plus guard predicates computed file-wide.
    pub fn analyze_multigranularity(
        &self,
        source: &str,
        language: Language,
        modules: &BTreeMap<String, SpanRef>,
        lines: &[SpanRef],
    ) -> Result<MultiGranularity, EngineError> {
        let total = line_count(source);
        for span in modules.values().chain(lines.iter()) {
            if span.end_line > total {
                return Err(EngineError::SpanOutOfBounds {
                    span: *span,
                    lines: total,
                });
            }
        }
        let all = self.extractor.extract_facts(source, language, None);
        let file = self.run(all.clone()).ranking;
        let modules = modules
            .iter()
            .map(|(name, range)| {
                let facts = all
                    .iter()
                    .filter(|f| range.contains(&f.span))
                    .cloned()
                    .collect();
                (name.clone(), self.run(facts).ranking)
            })
            .collect();
        let lines = lines
            .iter()
            .map(|span| {
                let facts = all
                    .iter()
                    .cloned()
                    .map(|mut f| {
                        f.contextual = !span.contains(&f.span);
                        f
                    })
                    .collect();
                (*span, self.run(facts).ranking)
            })
            .collect();
        Ok(MultiGranularity {
            file,
            modules,
            lines,
        })
    }

    /// Line ranges for named modules, located through class declarations.
    ///
    /// A declared class covers its body (or, for body-less declarations, the
    /// lines up to the next declaration). Names without a declaration cover the
    /// whole file.
    pub fn module_ranges(
        &self,
        source: &str,
        language: Language,
        names: &BTreeSet<String>,
    ) -> BTreeMap<String, SpanRef> {
        let total = line_count(source);
        let whole = SpanRef::new(1, total).unwrap();
        let decls: Vec<Fact> = self
            .extractor
            .extract_facts(source, language, None)
            .into_iter()
            .filter(|f| f.kind == FactKind::ClassDecl)
            .collect();
        names
            .iter()
            .map(|name| {
                let range = decls
                    .iter()
                    .position(|d| &d.symbol == name)
                    .map(|i| {
                        let d = &decls[i];
                        if !d.span.is_single_line() {
                            d.span
                        } else {
                            let end = decls[i + 1..]
                                .iter()
                                .map(|n| n.span.start_line)
                                .find(|&l| l > d.span.start_line)
                                .map(|l| l - 1)
                                .unwrap_or(total);
                            SpanRef::new(d.span.start_line, end.max(d.span.start_line)).unwrap()
                        }
                    })
                    .unwrap_or(whole);
                (name.clone(), range)
            })
            .collect()
    }
}
