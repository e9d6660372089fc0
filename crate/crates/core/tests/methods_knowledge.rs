mod common;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use common::*;
use privcheck::corpus::{Language, ViolationRecord};
use privcheck::knowledge::{
    build_kb, similarity, ArticleCatalog, ArticleInfo, KbDoc, KbDocKind, KnowledgeBase,
    LexicalCosine,
};
use privcheck::methods::{
    parse_model_output, rag_predict, react_run, render_prompt, render_rag_prompt, ChatMessage,
    FnReasoner, InferenceConfig, LabelSet, ParseMode, ScriptedReasoner, Tool, Toolbox,
};
use proptest::prelude::*;

const INSTRUCTIONS: [&str; 8] = [
    "You are a GDPR compliance expert. Your task is to determine which GDPR articles are violated by the following code snippet.",
    "GDPR Article Meanings:",
    "- Article 5: Principles of processing",
    "- Article 6: Lawfulness of processing",
    "- Article 7: Conditions for consent",
    "Instructions:",
    "- Carefully analyze the code snippet.",
    "- Only output the violated GDPR article numbers, separated by commas (e.g.,5,6,32).",
];

#[test]
fn prompt_contains_instruction_lines() {
    let p = render_prompt("x();\n", &ArticleCatalog::builtin());
    let lines: Vec<&str> = p.lines().collect();
    for want in INSTRUCTIONS.iter().chain(
        [
            "- If there is no violation, output exactly 0.",
            "Code snippet:",
        ]
        .iter(),
    ) {
        assert!(lines.contains(want), "missing line {want:?}");
    }
    assert!(p.ends_with("Code snippet:\nx();\n"));
    let meanings = lines.iter().filter(|l| l.starts_with("- Article ")).count();
    assert_eq!(meanings, ArticleCatalog::builtin().len());
}

#[test]
fn zero_and_empty() {
    assert_eq!(LabelSet::default().to_string(), "0");
    let parsed = parse_model_output("0", ParseMode::Strict).unwrap();
    assert!(parsed.labels.0.is_empty());
    assert!(parse_model_output("banana", ParseMode::Strict).is_err());
    assert_eq!(
        parse_model_output("6, 32", ParseMode::Strict)
            .unwrap()
            .labels,
        LabelSet::new([6, 32])
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn label_format_round_trip(set in label_set()) {
        let labels = LabelSet::new(set.iter().copied());
        let text = labels.to_string();
        prop_assert_eq!(text == "0", set.is_empty());
        prop_assert_eq!(&parse_model_output(&text, ParseMode::Strict).unwrap().labels, &labels);
        prop_assert_eq!(&parse_model_output(&text, ParseMode::Lenient).unwrap().labels, &labels);
    }
}

fn oracle_similarity(a: &str, b: &str) -> f64 {
    let count = |s: &str| {
        let mut m: HashMap<String, f64> = HashMap::new();
        let mut cur = String::new();
        for ch in s.chars().chain(std::iter::once(' ')) {
            if ch.is_alphanumeric() {
                cur.push(ch);
            } else if !cur.is_empty() {
                *m.entry(cur.to_lowercase()).or_default() += 1.0;
                cur.clear();
            }
        }
        m
    };
    let (x, y) = (count(a), count(b));
    let dot: f64 = x
        .iter()
        .map(|(k, v)| v * y.get(k).copied().unwrap_or(0.0))
        .sum();
    let nx = x.values().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.values().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        dot / (nx * ny)
    }
}

fn text() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        proptest::sample::select(vec![
            "camera", "open", "Camera", "http", "log", "x", "(", ".", "42", " ",
        ]),
        0..12,
    )
    .prop_map(|w| w.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn similarity_symmetric_bounded_and_matches_oracle(a in text(), b in text()) {
        let s = similarity(&a, &b);
        prop_assert_eq!(s, similarity(&b, &a));
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - oracle_similarity(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn retrieve_matches_brute_force(bodies in proptest::collection::vec(text(), 1..15), q in text(), n in 0usize..6) {
        let docs: Vec<KbDoc> = bodies
            .iter()
            .enumerate()
            .map(|(i, b)| KbDoc { id: format!("d{i:02}"), kind: KbDocKind::ArticleText, body: b.clone(), labels: BTreeSet::from([5]) })
            .collect();
        let kb = KnowledgeBase::from_docs(docs).unwrap();
        let got: Vec<&str> = kb.retrieve(&q, n).iter().map(|d| d.id.as_str()).collect();
        let brute: Vec<&str> = kb.retrieve_with(&LexicalCosine, &q, n).iter().map(|d| d.id.as_str()).collect();
        prop_assert_eq!(&got, &brute);
        prop_assert_eq!(got.len(), n.min(bodies.len()));
        let mut oracle: Vec<f64> = bodies.iter().map(|b| oracle_similarity(&q, b)).collect();
        oracle.sort_by(|x, y| y.total_cmp(x));
        for (d, want) in kb.retrieve(&q, n).iter().zip(oracle) {
            prop_assert!((oracle_similarity(&q, &d.body) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn spy_app_snippet_is_retrieved_for_open_camera() {
    let kb = build_kb(&spy_app_records(), &ArticleCatalog::builtin());
    let top = kb.retrieve("openCamera", 3);
    let example = top
        .iter()
        .find(|d| d.kind == KbDocKind::ViolationExample)
        .expect("example in top 3");
    assert_eq!(example.labels, BTreeSet::from([6, 32]));
    // brute force: no doc scores higher than the example
    let best = kb
        .docs()
        .iter()
        .map(|d| oracle_similarity("openCamera", &d.body))
        .fold(0.0, f64::max);
    assert!((oracle_similarity("openCamera", &example.body) - best).abs() < 1e-12);
}

fn synthetic_catalog(n: u32) -> ArticleCatalog {
    ArticleCatalog::from_articles((1..=n).map(|i| ArticleInfo {
        article: i + 4,
        title: format!("Synthetic article {i}"),
        summary: format!("placeholder summary {i}"),
    }))
    .unwrap()
}

fn synthetic_corpus(groups: usize) -> Vec<ViolationRecord> {
    (0..groups)
        .map(|i| ViolationRecord {
            app_name: format!("app{}", i % 13),
            repo_url: format!("https://github.com/example/app{}", i % 13),
            commit_id: format!("{:040x}", i % 13 + 1),
            violated_article: 5 + (i % 23) as u32,
            code_snippet_path: format!("src/File{}.java: line {}", i / 50, i % 50 + 1),
            code_snippet: format!("call{i}(data);\n"),
            annotation_note: format!("note {i}"),
        })
        .collect()
}

#[test]
fn kb_size_is_catalog_plus_snippet_groups() {
    let catalog = synthetic_catalog(23);
    let kb = build_kb(&synthetic_corpus(887), &catalog);
    assert_eq!(kb.len(), 23 + 887);
    let exported = kb.to_json();
    assert_eq!(
        KnowledgeBase::from_json(&exported).unwrap().to_json(),
        exported
    );

    let p = render_rag_prompt("call7(data);\n", &catalog, &kb, 3);
    assert!(p.contains("Retrieved Context:\n[1] "));
    assert!(p.contains("\n[3] ") && !p.contains("\n[4] "));
    // no context degrades to the plain prompt
    assert_eq!(
        render_rag_prompt("call7(data);\n", &catalog, &KnowledgeBase::empty(), 3),
        render_prompt("call7(data);\n", &catalog)
    );
}

#[test]
fn rag_echo_stub_returns_example_labels() {
    let kb = build_kb(&spy_app_records(), &ArticleCatalog::builtin());
    let echo = FnReasoner::new("echo", |m: &[ChatMessage]| {
        let p = &m.last().unwrap().content;
        let labels = p
            .split("Example violating articles ")
            .nth(1)
            .and_then(|s| s.split(':').next())
            .unwrap_or("0");
        Ok(labels.to_string())
    });
    let snippet = &spy_app_records()[0].code_snippet;
    let out = rag_predict(
        snippet,
        &kb,
        &echo,
        &ArticleCatalog::builtin(),
        &InferenceConfig::default(),
        3,
        ParseMode::Strict,
    )
    .unwrap();
    assert_eq!(out.labels, LabelSet::new([6, 32]));
    assert_eq!(echo.calls(), 1);
}

#[test]
fn react_scripted_trace_shape() {
    let stub = ScriptedReasoner::new(
        "s",
        [
            "Thought: check the definition\nAction: gdpr_lookup\nAction Input: 6",
            "Thought: run rules\nAction: rule_check\nAction Input:",
            "Thought: done\nAction: finish\nAction Input: 6, 32",
        ],
    );
    let snippet = read_fixture("camera_no_consent.java");
    let (ans, trace) = react_run(
        &snippet,
        Language::Java,
        &Toolbox::default(),
        &stub,
        &InferenceConfig::default(),
        8,
    )
    .unwrap();
    assert_eq!(ans.labels, LabelSet::new([6, 32]));
    let tools: Vec<Tool> = trace.steps.iter().map(|s| s.tool).collect();
    assert_eq!(tools, vec![Tool::GdprLookup, Tool::RuleCheck, Tool::Finish]);
    assert!(trace.steps[0]
        .observation
        .contains("Lawfulness of processing"));
    assert!(trace.steps[1].observation.contains("Article 6"));
    assert!(!trace.truncated);
    assert_eq!(stub.calls(), 3);
}

fn reply() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("Thought: look\nAction: code_search\nAction Input: camera".to_string()),
        Just("Thought: rules\nAction: rule_check\nAction Input:".to_string()),
        Just("Thought: define\nAction: gdpr_lookup\nAction Input: 32".to_string()),
        Just("Thought: ok\nAction: finish\nAction Input: 6".to_string()),
        "[a-z0-9 ]{0,20}",
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn react_never_exceeds_cap(replies in proptest::collection::vec(reply(), 1..12), cap in 1usize..8) {
        let stub = Arc::new(ScriptedReasoner::new("s", replies.clone()).repeating());
        let (_, trace) = react_run("manager.openCamera(id, cb, null);\n", Language::Java, &Toolbox::default(), &stub, &InferenceConfig::default(), cap).unwrap();
        prop_assert!(trace.steps.len() <= cap);
        prop_assert!(stub.calls() <= cap);
        if trace.truncated {
            prop_assert_eq!(trace.steps.len(), cap);
            prop_assert!(trace.steps.iter().all(|s| s.tool != Tool::Finish));
        } else {
            prop_assert_eq!(trace.steps.last().map(|s| s.tool), Some(Tool::Finish));
        }
    }
}
