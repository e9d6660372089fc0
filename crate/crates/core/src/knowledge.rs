//! Article catalog and the lexical retrieval store used by the RAG method.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ViolationRecord;
use crate::par;
use crate::taskgen::build_task2;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("no article {0} in the catalog")]
    NotFound(u32),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed document: {0}")]
    Format(String),
    #[error("article {0} listed twice")]
    DuplicateArticle(u32),
    #[error("example `{0}` has no labels")]
    UnlabeledExample(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleInfo {
    #[serde(alias = "number")]
    pub article: u32,
    pub title: String,
    pub summary: String,
}

impl ArticleInfo {
    /// The prompt-facing definition, e.g. `Article 5: Principles of processing`.
    pub fn meaning_line(&self) -> String {
        format!("Article {}: {}", self.article, self.title)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CatalogDoc {
    List(Vec<ArticleInfo>),
    Versioned {
        #[allow(dead_code)]
        version: u32,
        articles: Vec<ArticleInfo>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ArticleCatalog {
    articles: BTreeMap<u32, ArticleInfo>,
}

const BUILTIN_ARTICLES: &str = include_str!("../data/articles.json");

impl ArticleCatalog {
    pub fn builtin() -> Arc<ArticleCatalog> {
        static CATALOG: OnceLock<Arc<ArticleCatalog>> = OnceLock::new();
        CATALOG
            .get_or_init(|| {
                Arc::new(Self::parse(BUILTIN_ARTICLES).expect("bundled article catalog"))
            })
            .clone()
    }

    pub fn parse(text: &str) -> Result<Self, KnowledgeError> {
        let doc: CatalogDoc =
            serde_json::from_str(text).map_err(|e| KnowledgeError::Format(e.to_string()))?;
        let list = match doc {
            CatalogDoc::List(l) => l,
            CatalogDoc::Versioned { articles, .. } => articles,
        };
        Self::from_articles(list)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, KnowledgeError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| KnowledgeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn from_articles(
        list: impl IntoIterator<Item = ArticleInfo>,
    ) -> Result<Self, KnowledgeError> {
        let mut articles = BTreeMap::new();
        for a in list {
            let n = a.article;
            if articles.insert(n, a).is_some() {
                return Err(KnowledgeError::DuplicateArticle(n));
            }
        }
        Ok(Self { articles })
    }

    pub fn lookup(&self, n: u32) -> Result<&ArticleInfo, KnowledgeError> {
        self.articles.get(&n).ok_or(KnowledgeError::NotFound(n))
    }

    /// Articles in ascending number order.
    pub fn iter(&self) -> impl Iterator<Item = &ArticleInfo> {
        self.articles.values()
    }

    pub fn numbers(&self) -> BTreeSet<u32> {
        self.articles.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }
}

pub fn article_lookup(catalog: &ArticleCatalog, n: u32) -> Result<&ArticleInfo, KnowledgeError> {
    catalog.lookup(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KbDocKind {
    ArticleText,
    ViolationExample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbDoc {
    pub id: String,
    pub kind: KbDocKind,
    pub body: String,
    pub labels: BTreeSet<u32>,
}

/// Text similarity in `[0, 1]`.
pub trait Similarity: Send + Sync {
    fn score(&self, a: &str, b: &str) -> f64;
}

/// Token-frequency cosine over lowercased alphanumeric tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalCosine;

impl Similarity for LexicalCosine {
    fn score(&self, a: &str, b: &str) -> f64 {
        similarity(a, b)
    }
}

type TermVector = HashMap<String, u32>;

fn term_vector(text: &str) -> TermVector {
    let mut v = HashMap::new();
    for tok in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        *v.entry(tok.to_lowercase()).or_insert(0) += 1;
    }
    v
}

/// Squared Euclidean norm; keeping it squared makes self-similarity exactly 1.
fn norm(v: &TermVector) -> f64 {
    v.values().map(|&c| (c as f64) * (c as f64)).sum::<f64>()
}

fn cosine(a: &TermVector, na: f64, b: &TermVector, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .iter()
        .filter_map(|(t, &c)| large.get(t).map(|&d| c as f64 * d as f64))
        .sum();
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

pub fn similarity(a: &str, b: &str) -> f64 {
    let (va, vb) = (term_vector(a), term_vector(b));
    cosine(&va, norm(&va), &vb, norm(&vb))
}

#[derive(Debug, Clone)]
struct Indexed {
    terms: TermVector,
    norm: f64,
}

/// Immutable after construction; retrieval is safe from many threads.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    docs: Vec<KbDoc>,
    index: Vec<Indexed>,
}

#[derive(Serialize, Deserialize)]
struct KbExport {
    version: u32,
    docs: Vec<KbDoc>,
}

impl KnowledgeBase {
    pub fn from_docs(docs: Vec<KbDoc>) -> Result<Self, KnowledgeError> {
        for d in &docs {
            if d.kind == KbDocKind::ViolationExample && d.labels.is_empty() {
                return Err(KnowledgeError::UnlabeledExample(d.id.clone()));
            }
        }
        let index = docs
            .iter()
            .map(|d| {
                let terms = term_vector(&d.body);
                let norm = norm(&terms);
                Indexed { terms, norm }
            })
            .collect();
        Ok(Self { docs, index })
    }

    pub fn empty() -> Self {
        Self {
            docs: Vec::new(),
            index: Vec::new(),
        }
    }

    pub fn docs(&self) -> &[KbDoc] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// At most `top_n` docs by descending similarity, ties broken by id.
    pub fn retrieve(&self, query: &str, top_n: usize) -> Vec<&KbDoc> {
        let q = term_vector(query);
        let qn = norm(&q);
        let idx: Vec<usize> = (0..self.docs.len()).collect();
        let scores = par::map(&idx, |&i| {
            cosine(&q, qn, &self.index[i].terms, self.index[i].norm)
        });
        self.top(scores, top_n)
    }

    /// Brute-force retrieval with an arbitrary scorer.
    pub fn retrieve_with(&self, scorer: &dyn Similarity, query: &str, top_n: usize) -> Vec<&KbDoc> {
        let scores = par::map(&self.docs, |d| scorer.score(query, &d.body));
        self.top(scores, top_n)
    }

    fn top(&self, scores: Vec<f64>, top_n: usize) -> Vec<&KbDoc> {
        let mut order: Vec<usize> = (0..self.docs.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.docs[a].id.cmp(&self.docs[b].id))
        });
        order
            .into_iter()
            .take(top_n)
            .map(|i| &self.docs[i])
            .collect()
    }

    pub fn to_json(&self) -> String {
        let doc = KbExport {
            version: 1,
            docs: self.docs.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("kb serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, KnowledgeError> {
        let doc: KbExport =
            serde_json::from_str(text).map_err(|e| KnowledgeError::Format(e.to_string()))?;
        Self::from_docs(doc.docs)
    }
}

pub fn article_doc_id(n: u32) -> String {
    format!("article-{n:03}")
}

pub fn example_doc_id(i: usize) -> String {
    format!("example-{i:04}")
}

/// One doc per catalog article, then one per Task 2 snippet group.
pub fn build_kb(corpus: &[ViolationRecord], catalog: &ArticleCatalog) -> KnowledgeBase {
    let mut docs: Vec<KbDoc> = catalog
        .iter()
        .map(|a| KbDoc {
            id: article_doc_id(a.article),
            kind: KbDocKind::ArticleText,
            body: format!("{}. {}", a.meaning_line(), a.summary),
            labels: BTreeSet::from([a.article]),
        })
        .collect();
    docs.extend(
        build_task2(corpus)
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| KbDoc {
                id: example_doc_id(i),
                kind: KbDocKind::ViolationExample,
                body: e.code_snippet,
                labels: e.violated_articles.into_iter().collect(),
            }),
    );
    KnowledgeBase::from_docs(docs).expect("task entries always carry labels")
}
