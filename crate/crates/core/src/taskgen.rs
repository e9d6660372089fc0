//! Derives the file-centric (Task 1) and snippet-centric (Task 2) datasets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{parse_span, SpanRef, ViolationRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineViolation {
    pub span: SpanRef,
    pub articles: BTreeSet<u32>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task1Entry {
    pub repo_url: String,
    pub app_name: String,
    pub commit_id: String,
    pub file_path: String,
    pub file_level: BTreeSet<u32>,
    pub module_level: BTreeMap<String, BTreeSet<u32>>,
    pub line_level: Vec<LineViolation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task2Entry {
    pub repo_url: String,
    pub app_name: String,
    pub commit_id: String,
    pub code_snippet_path: String,
    pub code_snippet: String,
    pub violated_articles: Vec<u32>,
}

/// Builder output plus the non-fatal input anomalies that were collapsed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Built<T> {
    pub entries: Vec<T>,
    pub warnings: Vec<String>,
}

fn class_decl_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"\b(?:class|interface|enum|object|struct)\s+([A-Z][A-Za-z0-9_]*)").unwrap()
    })
}

/// Class-like names declared in a piece of source text, in order of appearance.
pub fn declared_classes(text: &str) -> Vec<String> {
    class_decl_re()
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

/// File name without directories or extension.
pub fn file_stem(file_path: &str) -> String {
    let name = file_path.rsplit(['/', '\\']).next().unwrap_or(file_path);
    match name.split_once('.') {
        Some((stem, _)) if !stem.is_empty() => stem.to_string(),
        _ => name.to_string(),
    }
}

/// Most frequently declared class across the file's snippets (ties go to the
/// lexicographically first name), or the file stem when none is declared.
pub fn infer_module(file_path: &str, records: &[ViolationRecord]) -> String {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        for name in declared_classes(&r.code_snippet) {
            *counts.entry(name).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(name, _)| name)
        .unwrap_or_else(|| file_stem(file_path))
}

fn module_for_record(record: &ViolationRecord, file_module: &str) -> String {
    let own = declared_classes(&record.code_snippet);
    if own.is_empty() {
        return file_module.to_string();
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for n in &own {
        *counts.entry(n.as_str()).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(n, _)| n.to_string())
        .unwrap_or_else(|| file_module.to_string())
}

/// File path and optional span of a record; unparseable spans degrade to span-less.
pub fn record_file(record: &ViolationRecord) -> (String, Option<SpanRef>) {
    parse_span(&record.code_snippet_path).unwrap_or_else(|e| {
        warn!("{e}; treating the path as span-less");
        (record.code_snippet_path.trim().to_string(), None)
    })
}

/// (repo url, app name, file path)
type FileKey = (String, String, String);
/// Articles on a span and their (article, note) pairs.
type LineNotes<'a> = (BTreeSet<u32>, BTreeSet<(u32, &'a str)>);

pub fn build_task1(corpus: &[ViolationRecord]) -> Built<Task1Entry> {
    let mut warnings = Vec::new();
    let mut groups: BTreeMap<FileKey, Vec<(&ViolationRecord, Option<SpanRef>)>> = BTreeMap::new();
    for r in corpus {
        let (file, span) = match parse_span(&r.code_snippet_path) {
            Ok(v) => v,
            Err(e) => {
                warnings.push(format!("{e}; treating the path as span-less"));
                (r.code_snippet_path.trim().to_string(), None)
            }
        };
        groups
            .entry((r.repo_url.clone(), r.app_name.clone(), file))
            .or_default()
            .push((r, span));
    }

    let mut entries = Vec::with_capacity(groups.len());
    for ((repo_url, app_name, file_path), members) in groups {
        let records: Vec<ViolationRecord> = members.iter().map(|(r, _)| (*r).clone()).collect();
        let file_module = infer_module(&file_path, &records);

        let mut file_level = BTreeSet::new();
        let mut module_level: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
        let mut lines: BTreeMap<SpanRef, LineNotes> = BTreeMap::new();
        let mut seen_pairs = BTreeSet::new();

        for (r, span) in &members {
            if !seen_pairs.insert((r.code_snippet_path.as_str(), r.violated_article)) {
                warnings.push(format!(
                    "duplicate article {} for `{}`",
                    r.violated_article, r.code_snippet_path
                ));
            }
            file_level.insert(r.violated_article);
            module_level
                .entry(module_for_record(r, &file_module))
                .or_default()
                .insert(r.violated_article);
            if let Some(span) = span {
                let slot = lines.entry(*span).or_default();
                slot.0.insert(r.violated_article);
                slot.1
                    .insert((r.violated_article, r.annotation_note.as_str()));
            }
        }

        let line_level = lines
            .into_iter()
            .map(|(span, (articles, notes))| {
                // notes ordered by article; a note shared by several articles appears once
                let mut description: Vec<&str> = Vec::new();
                for (_, note) in notes {
                    if !description.contains(&note) {
                        description.push(note);
                    }
                }
                LineViolation {
                    span,
                    articles,
                    description: description.join("\n"),
                }
            })
            .collect();

        entries.push(Task1Entry {
            repo_url,
            app_name,
            commit_id: members[0].0.commit_id.clone(),
            file_path,
            file_level,
            module_level,
            line_level,
        });
    }
    for w in &warnings {
        warn!("task1: {w}");
    }
    Built { entries, warnings }
}

pub fn build_task2(corpus: &[ViolationRecord]) -> Built<Task2Entry> {
    let mut warnings = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut entries: Vec<(Task2Entry, BTreeSet<u32>)> = Vec::new();
    for r in corpus {
        match index.get(r.code_snippet_path.as_str()) {
            Some(&i) => {
                let (entry, set) = &mut entries[i];
                if entry.code_snippet != r.code_snippet {
                    warnings.push(format!(
                        "conflicting snippet text for `{}`; keeping the first occurrence",
                        r.code_snippet_path
                    ));
                }
                if !set.insert(r.violated_article) {
                    warnings.push(format!(
                        "duplicate article {} for `{}`",
                        r.violated_article, r.code_snippet_path
                    ));
                }
            }
            None => {
                index.insert(&r.code_snippet_path, entries.len());
                entries.push((
                    Task2Entry {
                        repo_url: r.repo_url.clone(),
                        app_name: r.app_name.clone(),
                        commit_id: r.commit_id.clone(),
                        code_snippet_path: r.code_snippet_path.clone(),
                        code_snippet: r.code_snippet.clone(),
                        violated_articles: Vec::new(),
                    },
                    BTreeSet::from([r.violated_article]),
                ));
            }
        }
    }
    for w in &warnings {
        warn!("task2: {w}");
    }
    let entries = entries
        .into_iter()
        .map(|(mut e, set)| {
            e.violated_articles = set.into_iter().collect();
            e
        })
        .collect();
    Built { entries, warnings }
}

/// Records belonging to one Task 1 entry's file, in corpus order.
pub fn records_for_file<'a>(
    corpus: &'a [ViolationRecord],
    entry: &Task1Entry,
) -> Vec<&'a ViolationRecord> {
    corpus
        .iter()
        .filter(|r| {
            r.repo_url == entry.repo_url
                && r.app_name == entry.app_name
                && record_file(r).0 == entry.file_path
        })
        .collect()
}

pub fn to_json<T: Serialize>(entries: &[T]) -> String {
    let mut s = serde_json::to_string_pretty(entries).expect("entries serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, article: u32, snippet: &str) -> ViolationRecord {
        ViolationRecord {
            app_name: "App".into(),
            repo_url: "https://github.com/x/App".into(),
            commit_id: "d524cef38b5526861a724f3f9b08b8b9a4a3d06a".into(),
            violated_article: article,
            code_snippet_path: path.into(),
            code_snippet: snippet.into(),
            annotation_note: format!("note for {article}"),
        }
    }

    fn spy_app() -> Vec<ViolationRecord> {
        let p = "app/src/main/java/me/hawkshaw/test/MainActivity2.java: line 202";
        let s = "            manager.openCamera(camerId, stateCallback, null);\n";
        vec![rec(p, 6, s), rec(p, 32, s)]
    }

    #[test]
    fn spy_app_records_make_one_entry_each() {
        let t1 = build_task1(&spy_app()).entries;
        assert_eq!(t1.len(), 1);
        assert_eq!(t1[0].file_level, BTreeSet::from([6, 32]));
        assert_eq!(t1[0].line_level.len(), 1);
        assert_eq!(t1[0].line_level[0].span, SpanRef::line(202).unwrap());
        assert_eq!(t1[0].line_level[0].articles, BTreeSet::from([6, 32]));
        assert_eq!(
            t1[0].module_level,
            BTreeMap::from([("MainActivity2".to_string(), BTreeSet::from([6, 32]))])
        );

        let t2 = build_task2(&spy_app()).entries;
        assert_eq!(t2.len(), 1);
        assert_eq!(t2[0].violated_articles, vec![6, 32]);
    }

    #[test]
    fn empty_corpus() {
        assert!(build_task1(&[]).entries.is_empty());
        assert!(build_task2(&[]).entries.is_empty());
    }

    #[test]
    fn singleton_task2() {
        let t2 = build_task2(&[rec("a.kt: line 3", 5, "x()")]).entries;
        assert_eq!(t2[0].violated_articles, vec![5]);
    }

    #[test]
    fn module_inference() {
        assert_eq!(
            infer_module(
                "a/b/MainActivity2.java",
                &[rec("a/b/MainActivity2.java: line 1", 6, "x();")]
            ),
            "MainActivity2"
        );
        let fixture = include_str!("../tests/fixtures/camera_service_snippet.java");
        assert_eq!(
            infer_module(
                "a/b/Svc.java",
                &[rec("a/b/Svc.java: lines 1-12", 6, fixture)]
            ),
            "CameraService"
        );
        assert_eq!(infer_module("config/settings.json", &[]), "settings");
    }

    #[test]
    fn module_tie_breaks_lexicographically() {
        let recs = [
            rec("f.kt: lines 1-3", 6, "class Zeta {}\nclass Alpha {}"),
            rec("f.kt: lines 5-6", 6, "object Beta"),
        ];
        assert_eq!(infer_module("f.kt", &recs), "Alpha");
    }

    #[test]
    fn duplicates_collapse_with_warning() {
        let mut c = spy_app();
        c.push(c[0].clone());
        let t2 = build_task2(&c);
        assert_eq!(t2.entries[0].violated_articles, vec![6, 32]);
        assert_eq!(t2.warnings.len(), 1);
        let t1 = build_task1(&c);
        assert_eq!(t1.warnings.len(), 1);
    }

    #[test]
    fn conflicting_snippet_keeps_first() {
        let c = [
            rec("a.kt: line 3", 5, "first()"),
            rec("a.kt: line 3", 6, "second()"),
        ];
        let t2 = build_task2(&c);
        assert_eq!(t2.entries[0].code_snippet, "first()");
        assert_eq!(t2.entries[0].violated_articles, vec![5, 6]);
        assert!(t2.warnings[0].contains("conflicting"));
    }

    #[test]
    fn absent_span_records_contribute_to_file_level_only() {
        let c = [
            rec("cfg/settings.json", 25, "{\"k\": 1}"),
            rec("cfg/settings.json: line 2", 32, "\"k\": 1"),
        ];
        let t1 = build_task1(&c).entries;
        assert_eq!(t1.len(), 1);
        assert_eq!(t1[0].file_level, BTreeSet::from([25, 32]));
        assert_eq!(t1[0].line_level.len(), 1);
        assert_eq!(t1[0].line_level[0].articles, BTreeSet::from([32]));
    }

    #[test]
    fn lines_sorted_and_entries_ordered() {
        let c = [
            rec("b.kt: lines 10-12", 5, "x"),
            rec("b.kt: line 3", 6, "y"),
            rec("a.kt: line 1", 7, "z"),
        ];
        let t1 = build_task1(&c).entries;
        assert_eq!(t1[0].file_path, "a.kt");
        let spans: Vec<_> = t1[1].line_level.iter().map(|l| l.span).collect();
        assert_eq!(
            spans,
            vec![SpanRef::line(3).unwrap(), SpanRef::new(10, 12).unwrap()]
        );
    }
}
