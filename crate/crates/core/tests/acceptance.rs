//! One PASS/FAIL line per acceptance criterion. Exits non-zero on any FAIL.
//!
//! The published-dataset criterion runs only when `PRIVCHECK_CORPUS` points
//! at the corpus file; otherwise it prints SKIP.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::process::Command;
use std::time::Instant;

use common::*;
use privcheck::corpus::{compute_stats, detect_language, load_corpus, Language, SpanRef};
use privcheck::engine::{FormalAnalyzer, RuleCatalog};
use privcheck::knowledge::ArticleCatalog;
use privcheck::methods::{
    parse_model_output, react_run, render_prompt, InferenceConfig, LabelSet, ParseMode,
    ScriptedReasoner, Tool, Toolbox,
};
use privcheck::metrics::{accuracy_at_k, macro_metrics, multilabel_accuracy, Granularity};
use privcheck::taskgen::{build_task1, build_task2, to_json};
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($msg)+)),
        }
    };
}

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&eval_set(), |set| {
            check_eval_set(&set).map_err(proptest::test_runner::TestCaseError::fail)
        })
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.2}s");
    Ok(format!("1000 sets within 1e-12 in {secs:.2}s"))
}

fn metric_fixtures() -> Outcome {
    let gt: BTreeSet<u32> = [5].into();
    let xs = [
        ranked(&[5], &gt),
        ranked(&[1, 2, 5], &gt),
        ranked(&[1], &gt),
    ];
    let at1 = accuracy_at_k(&xs, 1, Granularity::File).map_err(|e| e.to_string())?;
    ensure!(at1 == 1.0 / 3.0, "acc@1 = {at1}");
    let u: BTreeSet<u32> = [5, 6].into();
    let ls = [
        labeled(&[5, 6].into(), &[5].into()),
        labeled(&[5].into(), &[5, 6].into()),
    ];
    let m = macro_metrics(&ls, &u).map_err(|e| e.to_string())?;
    ensure!(m == (0.5, 0.5, 0.5), "macro = {m:?}");
    let acc = multilabel_accuracy(&ls, &u).map_err(|e| e.to_string())?;
    ensure!(acc == 0.5, "multilabel accuracy = {acc}");
    Ok("acc@1 = 1/3, macro = 0.5/0.5/0.5, accuracy = 0.5".into())
}

fn taskgen_fixtures() -> Outcome {
    let records = spy_app_records();
    let t2 = build_task2(&records).entries;
    ensure!(
        t2.len() == 1 && t2[0].violated_articles == vec![6, 32],
        "task 2: {t2:?}"
    );
    let t1 = build_task1(&records).entries;
    ensure!(
        t1.len() == 1 && t1[0].line_level.len() == 1,
        "task 1 entries: {}",
        t1.len()
    );
    let line = &t1[0].line_level[0];
    ensure!(
        line.span == SpanRef::line(202).unwrap(),
        "span {:?}",
        line.span
    );
    ensure!(
        line.articles == BTreeSet::from([6, 32]),
        "articles {:?}",
        line.articles
    );
    for _ in 0..3 {
        let g1 =
            std::fs::read_to_string(golden("spy_app_task1.json")).map_err(|e| e.to_string())?;
        let g2 =
            std::fs::read_to_string(golden("spy_app_task2.json")).map_err(|e| e.to_string())?;
        ensure!(
            to_json(&build_task1(&records).entries) == g1,
            "task 1 golden differs"
        );
        ensure!(
            to_json(&build_task2(&records).entries) == g2,
            "task 2 golden differs"
        );
    }
    Ok("one entry each, span 202-202 {6,32}, golden bytes stable".into())
}

fn published_dataset() -> Option<Outcome> {
    let path = std::env::var("PRIVCHECK_CORPUS").ok()?;
    Some((|| {
        let corpus = load_corpus(&path).map_err(|e| e.to_string())?;
        ensure!(corpus.len() == 1951, "records {}", corpus.len());
        let t1 = build_task1(&corpus).entries.len();
        let t2 = build_task2(&corpus).entries.len();
        ensure!(t1 == 368 && t2 == 887, "task sizes {t1}/{t2}");
        let s = compute_stats(&corpus);
        ensure!(
            (s.multi_line_count, s.single_line_count) == (994, 957),
            "split {}/{}",
            s.multi_line_count,
            s.single_line_count
        );
        for (a, n) in [(6, 442), (5, 430), (25, 311), (32, 254)] {
            ensure!(
                s.per_article_counts.get(&a) == Some(&n),
                "article {a}: {:?}",
                s.per_article_counts.get(&a)
            );
        }
        let ext: BTreeMap<&str, usize> = s
            .per_extension_counts
            .iter()
            .map(|(l, n)| (l.as_str(), *n))
            .collect();
        for (e, n) in [
            ("js", 528),
            ("json", 474),
            ("java", 298),
            ("kt", 244),
            ("cs", 174),
            ("php", 126),
            ("xml", 63),
            ("html", 26),
            ("py", 17),
            ("h", 1),
        ] {
            ensure!(ext.get(e) == Some(&n), ".{e}: {:?}", ext.get(e));
        }
        let close = |x: f64, y: f64| (x - y).abs() <= 0.01;
        let (sn, nt) = (&s.snippet_length_stats, &s.note_length_stats);
        ensure!(
            close(sn.mean, 171.01) && close(sn.median, 95.0) && close(sn.stddev, 206.58),
            "snippet lengths {sn:?}"
        );
        ensure!(
            close(nt.mean, 224.38) && close(nt.median, 208.0) && close(nt.stddev, 90.00),
            "note lengths {nt:?}"
        );
        Ok("all published counts and length statistics match".into())
    })())
}

fn engine_fixtures() -> Outcome {
    let analyzer = FormalAnalyzer::default();
    let top2 = |name: &str| {
        let a = analyzer.analyze(&read_fixture(name), Language::Java, None);
        a.ranking
            .articles
            .iter()
            .take(2)
            .copied()
            .collect::<Vec<u32>>()
    };
    let camera = top2("camera_no_consent.java");
    ensure!(camera.contains(&6), "camera top-2 {camera:?}");
    let http = top2("http_upload.java");
    ensure!(http.contains(&32), "http top-2 {http:?}");
    let guarded = analyzer.analyze(
        &read_fixture("camera_with_consent.java"),
        Language::Java,
        None,
    );
    ensure!(
        guarded.findings.iter().all(|f| f.article != 6),
        "guarded fixture fired article 6"
    );

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = write_tree(dir.path(), 50);
    let render = || -> Result<String, String> {
        let mut out = String::new();
        for p in &files {
            let src = std::fs::read_to_string(p).map_err(|e| e.to_string())?;
            let a = analyzer.analyze(&src, detect_language(&p.to_string_lossy()), None);
            out.push_str(&serde_json::to_string(&a).map_err(|e| e.to_string())?);
        }
        Ok(out)
    };
    let first = render()?;
    for _ in 0..4 {
        ensure!(render()? == first, "repeated analysis differs");
    }
    let n = RuleCatalog::builtin().len();
    ensure!(n >= 35, "catalog has {n} rules");
    Ok(format!(
        "camera {camera:?}, http {http:?}, 50 files x5 identical, {n} rules"
    ))
}

fn zero_shot_protocol() -> Outcome {
    let p = render_prompt("snippet();\n", &ArticleCatalog::builtin());
    for line in [
        "You are a GDPR compliance expert. Your task is to determine which GDPR articles are violated by the following code snippet.",
        "GDPR Article Meanings:",
        "- Article 5: Principles of processing",
        "- Article 6: Lawfulness of processing",
        "- Article 7: Conditions for consent",
        "Instructions:",
        "- Carefully analyze the code snippet.",
        "- Only output the violated GDPR article numbers, separated by commas (e.g.,5,6,32).",
        "- If there is no violation, output exactly 0.",
        "Code snippet:",
    ] {
        ensure!(p.lines().any(|l| l == line), "prompt lacks {line:?}");
    }
    let mut runner = TestRunner::new(Config {
        cases: 200,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&label_set(), |set| {
            let labels = LabelSet::new(set.iter().copied());
            let back = parse_model_output(&labels.to_string(), ParseMode::Strict)
                .map_err(|e| proptest::test_runner::TestCaseError::fail(e.to_string()))?;
            proptest::prop_assert_eq!(back.labels, labels);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    ensure!(
        LabelSet::default().to_string() == "0",
        "empty set renders as {}",
        LabelSet::default()
    );
    let zero = parse_model_output("0", ParseMode::Strict).map_err(|e| e.to_string())?;
    ensure!(zero.labels.0.is_empty(), "0 parsed as {}", zero.labels);
    Ok("instruction lines verbatim, 200 round trips, 0 <-> empty".into())
}

fn react_loop() -> Outcome {
    let cfg = InferenceConfig::default();
    let snippet = "manager.openCamera(camerId, stateCallback, null);\n";
    let scripted = ScriptedReasoner::new(
        "s",
        [
            "Thought: inspect\nAction: rule_check\nAction Input:",
            "Thought: camera without consent\nAction: finish\nAction Input: 6",
        ],
    );
    let (ans, trace) = react_run(
        snippet,
        Language::Java,
        &Toolbox::default(),
        &scripted,
        &cfg,
        5,
    )
    .map_err(|e| e.to_string())?;
    ensure!(ans.labels == LabelSet::new([6]), "answer {}", ans.labels);
    let tools: Vec<Tool> = trace.steps.iter().map(|s| s.tool).collect();
    ensure!(
        tools == vec![Tool::RuleCheck, Tool::Finish] && !trace.truncated,
        "trace {tools:?}"
    );

    for cap in 1..=6 {
        let endless = ScriptedReasoner::new(
            "s",
            ["Thought: more\nAction: code_search\nAction Input: camera"],
        )
        .repeating();
        let (_, t) = react_run(
            snippet,
            Language::Java,
            &Toolbox::default(),
            &endless,
            &cfg,
            cap,
        )
        .map_err(|e| e.to_string())?;
        ensure!(
            t.steps.len() == cap && t.truncated && endless.calls() == cap,
            "cap {cap}: {} steps",
            t.steps.len()
        );
    }
    let obs = Toolbox::default().execute(Tool::GdprLookup, "6", snippet, Language::Java);
    ensure!(obs.contains("Lawfulness of processing"), "lookup: {obs}");
    Ok("2-step trace, caps 1..=6 respected, lookup(6) ok".into())
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |task: &str| -> Result<String, String> {
        let o = Command::new(env!("CARGO_BIN_EXE_privcheck"))
            .args(["run", "--task", task, "--method", "formal", "--config"])
            .arg(fixture("run_formal.toml"))
            .arg("--out-dir")
            .arg(dir.path().join(task))
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(
            o.status.success(),
            "run --task {task}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).map_err(|e| e.to_string())
    };
    let rows = |md: &str| -> Vec<Vec<String>> {
        md.lines()
            .filter(|l| l.starts_with("| ") && !l.starts_with("| Method"))
            .map(|l| {
                l.trim_matches('|')
                    .split('|')
                    .map(|c| c.trim().to_string())
                    .collect()
            })
            .collect()
    };
    let t2 = run("2")?;
    ensure!(
        t2.contains("| Method | Accuracy | Macro-Precision | Macro-Recall | Macro-F1 |"),
        "task 2 header missing"
    );
    let r2 = rows(&t2);
    ensure!(r2.len() == 1 && r2[0].len() == 5, "task 2 rows {r2:?}");
    ensure!(
        r2[0][1..].iter().all(|v| v.parse::<f64>().is_ok()),
        "task 2 values {:?}",
        r2[0]
    );
    let t1 = run("1")?;
    let r1 = rows(&t1);
    ensure!(r1.len() == 3, "task 1 rows {}", r1.len());
    for r in &r1 {
        let v: Vec<f64> = r[1..].iter().filter_map(|x| x.parse().ok()).collect();
        ensure!(
            v.len() == 5 && v.windows(2).all(|w| w[0] <= w[1]),
            "acc@k {v:?}"
        );
    }
    Ok(format!(
        "task 2 row {:?}, task 1 acc@k non-decreasing",
        &r2[0][1..]
    ))
}

fn main() {
    let start = Instant::now();
    let criteria: [Check; 7] = [
        ("metrics oracle equivalence", metrics_oracle),
        ("worked metric fixtures", metric_fixtures),
        ("task generation fixtures", taskgen_fixtures),
        ("formal engine fixtures", engine_fixtures),
        ("zero-shot protocol", zero_shot_protocol),
        ("react loop", react_loop),
        ("end-to-end offline run", end_to_end),
    ];
    let mut failed = 0;
    let mut report = |name: &str, outcome: Option<Outcome>| match outcome {
        Some(Ok(d)) => println!("PASS  {name}: {d}"),
        Some(Err(d)) => {
            failed += 1;
            println!("FAIL  {name}: {d}");
        }
        None => println!("SKIP  {name}: set PRIVCHECK_CORPUS to the published corpus file"),
    };
    for (i, (name, check)) in criteria.iter().enumerate() {
        report(name, Some(check()));
        if i == 2 {
            report("published dataset counts", published_dataset());
        }
    }
    println!(
        "acceptance: {failed} failed, {:.2}s",
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
