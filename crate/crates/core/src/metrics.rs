//! Ranking accuracy at k, macro precision/recall/F1 and multi-label accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RankedPrediction;
use crate::methods::LabelSet;
use crate::par;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no {0}-level instances to score")]
    NoInstances(Granularity),
    #[error("k must be in 1..=5, got {0}")]
    InvalidK(usize),
    #[error("article universe is empty")]
    EmptyUniverse,
    #[error("no labeled instances to score")]
    NoLabeledInstances,
    #[error("instance {0} has empty ground truth")]
    EmptyGroundTruth(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    File,
    Module,
    Line,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::File, Granularity::Module, Granularity::Line];

    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::File => "file",
            Granularity::Module => "module",
            Granularity::Line => "line",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedInstance {
    pub granularity: Granularity,
    pub prediction: RankedPrediction,
    pub ground_truth: BTreeSet<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub prediction: LabelSet,
    pub ground_truth: LabelSet,
}

pub const MAX_K: usize = 5;

/// 1-based rank of the first predicted article that is in the ground truth.
pub fn first_correct_rank(
    prediction: &RankedPrediction,
    ground_truth: &BTreeSet<u32>,
) -> Option<usize> {
    prediction
        .articles
        .iter()
        .position(|a| ground_truth.contains(a))
        .map(|i| i + 1)
}

fn scoped(
    instances: &[RankedInstance],
    g: Granularity,
) -> Result<Vec<&RankedInstance>, MetricsError> {
    let mut out = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        if inst.granularity != g {
            continue;
        }
        if inst.ground_truth.is_empty() {
            return Err(MetricsError::EmptyGroundTruth(i));
        }
        out.push(inst);
    }
    if out.is_empty() {
        return Err(MetricsError::NoInstances(g));
    }
    Ok(out)
}

pub fn accuracy_at_k(
    instances: &[RankedInstance],
    k: usize,
    g: Granularity,
) -> Result<f64, MetricsError> {
    if !(1..=MAX_K).contains(&k) {
        return Err(MetricsError::InvalidK(k));
    }
    let scoped = scoped(instances, g)?;
    let hit: Vec<usize> = par::map(&scoped, |inst| {
        first_correct_rank(&inst.prediction, &inst.ground_truth).is_some_and(|r| r <= k) as usize
    });
    Ok(hit.iter().sum::<usize>() as f64 / scoped.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub granularity: Granularity,
    pub n_instances: usize,
    /// Accuracy@k for k = 1..=5.
    pub acc_at: BTreeMap<usize, f64>,
}

pub fn ranking_report(
    instances: &[RankedInstance],
    g: Granularity,
) -> Result<RankingReport, MetricsError> {
    let scoped = scoped(instances, g)?;
    let mut acc_at = BTreeMap::new();
    for k in 1..=MAX_K {
        acc_at.insert(k, accuracy_at_k(instances, k, g)?);
    }
    Ok(RankingReport {
        granularity: g,
        n_instances: scoped.len(),
        acc_at,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Unweighted means of per-article precision, recall and F1 over `universe`.
/// Zero denominators count as 0.
pub fn macro_metrics(
    instances: &[LabeledInstance],
    universe: &BTreeSet<u32>,
) -> Result<(f64, f64, f64), MetricsError> {
    if universe.is_empty() {
        return Err(MetricsError::EmptyUniverse);
    }
    let articles: Vec<u32> = universe.iter().copied().collect();
    let per_article = par::map(&articles, |&c| {
        let mut k = Counts::default();
        for inst in instances {
            match (inst.prediction.contains(c), inst.ground_truth.contains(c)) {
                (true, true) => k.tp += 1,
                (true, false) => k.fp += 1,
                (false, true) => k.fn_ += 1,
                (false, false) => {}
            }
        }
        let p = ratio(k.tp, k.tp + k.fp);
        let r = ratio(k.tp, k.tp + k.fn_);
        let f1 = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (p, r, f1)
    });
    let n = articles.len() as f64;
    let (p, r, f) = per_article.iter().fold((0.0, 0.0, 0.0), |acc, x| {
        (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2)
    });
    Ok((p / n, r / n, f / n))
}

/// Fraction of (instance, article) cells where prediction and truth agree.
pub fn multilabel_accuracy(
    instances: &[LabeledInstance],
    universe: &BTreeSet<u32>,
) -> Result<f64, MetricsError> {
    if universe.is_empty() {
        return Err(MetricsError::EmptyUniverse);
    }
    if instances.is_empty() {
        return Err(MetricsError::NoLabeledInstances);
    }
    let agree: Vec<usize> = par::map(instances, |inst| {
        universe
            .iter()
            .filter(|&&c| inst.prediction.contains(c) == inst.ground_truth.contains(c))
            .count()
    });
    Ok(agree.iter().sum::<usize>() as f64 / (instances.len() * universe.len()) as f64)
}

/// Which articles the macro averages and cell accuracy range over.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Universe {
    /// Union of ground-truth labels in the evaluation set.
    #[default]
    GroundTruth,
    /// A fixed article list, typically the article catalog.
    Fixed(BTreeSet<u32>),
}

impl Universe {
    pub fn label(&self) -> &'static str {
        match self {
            Universe::GroundTruth => "ground_truth",
            Universe::Fixed(_) => "fixed",
        }
    }

    pub fn resolve(&self, instances: &[LabeledInstance]) -> BTreeSet<u32> {
        match self {
            Universe::GroundTruth => instances
                .iter()
                .flat_map(|i| i.ground_truth.0.iter().copied())
                .collect(),
            Universe::Fixed(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub n_instances: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub article_universe: Vec<u32>,
    pub universe_mode: String,
}

pub fn classification_report(
    instances: &[LabeledInstance],
    universe: &Universe,
) -> Result<ClassificationReport, MetricsError> {
    let set = universe.resolve(instances);
    let accuracy = multilabel_accuracy(instances, &set)?;
    let (macro_precision, macro_recall, macro_f1) = macro_metrics(instances, &set)?;
    Ok(ClassificationReport {
        n_instances: instances.len(),
        accuracy,
        macro_precision,
        macro_recall,
        macro_f1,
        article_universe: set.into_iter().collect(),
        universe_mode: universe.label().to_string(),
    })
}

/// Scores for one run: per-granularity rankings (Task 1) or labels (Task 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: u8,
    pub method: String,
    pub n_instances: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranking: Vec<RankingReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
}
