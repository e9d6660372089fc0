//! Shared fixtures and brute-force oracles for the integration suites.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use privcheck::corpus::{load_corpus, ViolationRecord};
use privcheck::engine::RankedPrediction;
use privcheck::methods::LabelSet;
use privcheck::metrics::{Granularity, LabeledInstance, RankedInstance};
use proptest::prelude::*;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

pub fn read_fixture(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

pub fn spy_app_records() -> Vec<ViolationRecord> {
    load_corpus(fixture("spy_app_records.json")).unwrap()
}

pub fn fixture_corpus() -> Vec<ViolationRecord> {
    load_corpus(fixture("corpus.json")).unwrap()
}

// Oracles, recomputed from explicit confusion cells without library helpers.

pub fn oracle_acc_at_k(instances: &[(Vec<u32>, BTreeSet<u32>)], k: usize) -> f64 {
    let mut hits = 0.0;
    for (pred, gt) in instances {
        let mut hit = false;
        for a in pred.iter().take(k) {
            if gt.iter().any(|g| g == a) {
                hit = true;
            }
        }
        if hit {
            hits += 1.0;
        }
    }
    hits / instances.len() as f64
}

pub fn oracle_macro(
    instances: &[(BTreeSet<u32>, BTreeSet<u32>)],
    universe: &BTreeSet<u32>,
) -> (f64, f64, f64) {
    let mut ps = Vec::new();
    let mut rs = Vec::new();
    let mut fs = Vec::new();
    for c in universe {
        let cells: Vec<(bool, bool)> = instances
            .iter()
            .map(|(p, g)| (p.contains(c), g.contains(c)))
            .collect();
        let tp = cells.iter().filter(|x| **x == (true, true)).count() as f64;
        let fp = cells.iter().filter(|x| **x == (true, false)).count() as f64;
        let fn_ = cells.iter().filter(|x| **x == (false, true)).count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        // F1 from counts rather than from p and r
        let f = if tp > 0.0 {
            2.0 * tp / (2.0 * tp + fp + fn_)
        } else {
            0.0
        };
        ps.push(p);
        rs.push(r);
        fs.push(f);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&ps), mean(&rs), mean(&fs))
}

pub fn oracle_multilabel(
    instances: &[(BTreeSet<u32>, BTreeSet<u32>)],
    universe: &BTreeSet<u32>,
) -> f64 {
    let mut total = 0usize;
    let mut wrong = 0usize;
    for (p, g) in instances {
        for c in universe {
            total += 1;
            if p.contains(c) ^ g.contains(c) {
                wrong += 1;
            }
        }
    }
    1.0 - wrong as f64 / total as f64
}

pub fn ranked(pred: &[u32], gt: &BTreeSet<u32>) -> RankedInstance {
    RankedInstance {
        granularity: Granularity::File,
        prediction: RankedPrediction::from_ordered(pred.iter().copied()),
        ground_truth: gt.clone(),
    }
}

pub fn labeled(pred: &BTreeSet<u32>, gt: &BTreeSet<u32>) -> LabeledInstance {
    LabeledInstance {
        prediction: LabelSet::new(pred.iter().copied()),
        ground_truth: LabelSet::new(gt.iter().copied()),
    }
}

/// An evaluation set: a universe of at most 6 articles and at most 8 instances.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub universe: BTreeSet<u32>,
    pub ranked: Vec<(Vec<u32>, BTreeSet<u32>)>,
    pub labeled: Vec<(BTreeSet<u32>, BTreeSet<u32>)>,
}

const POOL: [u32; 10] = [5, 6, 7, 9, 13, 17, 25, 30, 32, 44];

pub fn eval_set() -> impl Strategy<Value = EvalSet> {
    (
        proptest::sample::subsequence(POOL.to_vec(), 1..=6),
        1usize..=8,
    )
        .prop_flat_map(|(u, n)| {
            let arts = u.clone();
            let subset = proptest::sample::subsequence(arts.clone(), 0..=arts.len());
            let nonempty = proptest::sample::subsequence(arts.clone(), 1..=arts.len());
            let ranking =
                proptest::sample::subsequence(arts.clone(), 0..=arts.len()).prop_shuffle();
            (
                Just(u),
                proptest::collection::vec((ranking, nonempty), n),
                proptest::collection::vec((subset.clone(), subset), n),
            )
                .prop_map(|(u, r, l)| EvalSet {
                    universe: u.into_iter().collect(),
                    ranked: r
                        .into_iter()
                        .map(|(p, g)| (p, g.into_iter().collect()))
                        .collect(),
                    labeled: l
                        .into_iter()
                        .map(|(p, g)| (p.into_iter().collect(), g.into_iter().collect()))
                        .collect(),
                })
        })
}

/// Compares every library metric against the oracles; returns the first mismatch.
pub fn check_eval_set(set: &EvalSet) -> Result<(), String> {
    use privcheck::metrics::{accuracy_at_k, macro_metrics, multilabel_accuracy};
    let ranked_insts: Vec<_> = set.ranked.iter().map(|(p, g)| ranked(p, g)).collect();
    for k in 1..=5 {
        let got = accuracy_at_k(&ranked_insts, k, Granularity::File).map_err(|e| e.to_string())?;
        let want = oracle_acc_at_k(&set.ranked, k);
        if (got - want).abs() > 1e-12 {
            return Err(format!("acc@{k}: {got} vs {want}"));
        }
    }
    let labeled_insts: Vec<_> = set.labeled.iter().map(|(p, g)| labeled(p, g)).collect();
    let got = macro_metrics(&labeled_insts, &set.universe).map_err(|e| e.to_string())?;
    let want = oracle_macro(&set.labeled, &set.universe);
    for (name, a, b) in [
        ("precision", got.0, want.0),
        ("recall", got.1, want.1),
        ("f1", got.2, want.2),
    ] {
        if (a - b).abs() > 1e-12 {
            return Err(format!("macro {name}: {a} vs {b}"));
        }
    }
    let got = multilabel_accuracy(&labeled_insts, &set.universe).map_err(|e| e.to_string())?;
    let want = oracle_multilabel(&set.labeled, &set.universe);
    if (got - want).abs() > 1e-12 {
        return Err(format!("multilabel accuracy: {got} vs {want}"));
    }
    Ok(())
}

pub fn label_set() -> impl Strategy<Value = BTreeSet<u32>> {
    proptest::collection::btree_set(1u32..=99, 0..8)
}

/// Writes `n` small source files mixing the engine fixtures with
/// deterministic variations, returning their paths in order.
pub fn write_tree(root: &Path, n: usize) -> Vec<PathBuf> {
    let templates = [
        ("java", read_fixture("camera_no_consent.java")),
        ("java", read_fixture("http_upload.java")),
        ("java", read_fixture("camera_with_consent.java")),
        ("java", read_fixture("camera_service_snippet.java")),
        (
            "kt",
            "package demo\n\nimport android.util.Log\n\nclass Tracker(private val lm: android.location.LocationManager) {\n    fun go() {\n        val l = lm.getLastKnownLocation(\"gps\")\n        Log.d(\"T\", l.toString())\n    }\n}\n"
                .to_string(),
        ),
        (
            "js",
            "const id = navigator.userAgent;\nfetch(\"http://stats.example.net/c\", { method: \"POST\", body: id });\nlocalStorage.setItem(\"token\", id);\n"
                .to_string(),
        ),
    ];
    let mut out = Vec::new();
    for i in 0..n {
        let (ext, body) = &templates[i % templates.len()];
        let dir = root.join(format!("pkg{}", i % 7));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("File{i:02}.{ext}"));
        let padding = "\n".repeat(i % 4);
        std::fs::write(&path, format!("{padding}{body}// variant {i}\n")).unwrap();
        out.push(path);
    }
    out
}
