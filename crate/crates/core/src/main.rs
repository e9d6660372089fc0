use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use privcheck::corpus::{
    compute_stats_with, detect_language, load_corpus, stats_table, StatsOptions,
};
use privcheck::engine::{load_rules, FormalAnalyzer, RuleCatalog};
use privcheck::facts::FactExtractor;
use privcheck::harness::{self, Dataset, ReportFormat, RunConfig, UniverseChoice};
use privcheck::knowledge::ArticleCatalog;
use privcheck::methods::MethodKind;
use privcheck::taskgen::{build_task1, build_task2, to_json};

#[derive(Parser)]
#[command(
    name = "privcheck",
    version,
    about = "GDPR violation detection in source code: analysis, task generation and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Structured,
    Csv,
    Markdown,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Structured => ReportFormat::Structured,
            Format::Csv => ReportFormat::Csv,
            Format::Markdown => ReportFormat::Markdown,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum UniverseArg {
    GroundTruth,
    Catalog,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus summary: span split, article and language counts, length statistics.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        /// Count records without a line span as single-line instead of multi-line.
        #[arg(long)]
        absent_span_single: bool,
        #[arg(long)]
        json: bool,
    },
    /// Build the multi-granularity localization dataset.
    GenTask1 {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the snippet classification dataset.
    GenTask2 {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the rule engine on a file or a literal snippet (`-` reads stdin).
    Analyze {
        target: String,
        /// Treat TARGET as snippet text rather than a path.
        #[arg(long)]
        snippet: bool,
        /// Language tag (java, kt, js, ...); inferred from the path otherwise.
        #[arg(long)]
        lang: Option<String>,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Restrict to a line range such as `10-20` or `7`.
        #[arg(long)]
        focus: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Run a method over a task dataset and score it.
    Run {
        #[arg(long)]
        task: Option<u8>,
        #[arg(long)]
        method: Option<MethodKind>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score a predictions file against a task dataset.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        /// Task dataset file; use --corpus to build it instead.
        #[arg(long, required_unless_present = "corpus")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ground-truth")]
        universe: UniverseArg,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
        /// Also write the structured metrics here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a structured metrics file.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_focus(s: &str) -> Result<privcheck::corpus::SpanRef> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
    privcheck::corpus::SpanRef::new(a, b).with_context(|| format!("invalid line range `{s}`"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Stats {
            corpus,
            absent_span_single,
            json,
        } => {
            let records = load_corpus(&corpus)?;
            let stats = compute_stats_with(
                &records,
                StatsOptions {
                    absent_span_is_multi_line: !absent_span_single,
                },
            );
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                print!("{}", stats_table(&stats));
            }
        }
        Command::GenTask1 { corpus, out } => {
            let built = build_task1(&load_corpus(&corpus)?);
            built.warnings.iter().for_each(|w| log::warn!("{w}"));
            emit(out.as_deref(), &to_json(&built.entries))?;
            eprintln!("{} task 1 entries", built.entries.len());
        }
        Command::GenTask2 { corpus, out } => {
            let built = build_task2(&load_corpus(&corpus)?);
            built.warnings.iter().for_each(|w| log::warn!("{w}"));
            emit(out.as_deref(), &to_json(&built.entries))?;
            eprintln!("{} task 2 entries", built.entries.len());
        }
        Command::Analyze {
            target,
            snippet,
            lang,
            rules,
            focus,
            json,
        } => {
            let (source, path_lang) = if snippet {
                (target.clone(), None)
            } else if target == "-" {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s)?;
                (s, None)
            } else {
                let text = std::fs::read_to_string(&target)
                    .with_context(|| format!("reading {target}"))?;
                (text, Some(detect_language(&target)))
            };
            let language = match lang {
                Some(tag) => privcheck::corpus::Language::from_tag(&tag)
                    .with_context(|| format!("unknown language `{tag}`"))?,
                None => path_lang.unwrap_or(privcheck::corpus::Language::Java),
            };
            let catalog = match rules {
                Some(p) => Arc::new(load_rules(p)?),
                None => RuleCatalog::builtin(),
            };
            let analyzer = FormalAnalyzer::new(FactExtractor::default(), catalog);
            let focus = focus.as_deref().map(parse_focus).transpose()?;
            let analysis = analyzer.analyze(&source, language, focus);
            if json {
                println!("{}", serde_json::to_string_pretty(&analysis)?);
            } else {
                let ranking: Vec<String> = analysis
                    .ranking
                    .articles
                    .iter()
                    .map(u32::to_string)
                    .collect();
                println!(
                    "ranking: {}",
                    if ranking.is_empty() {
                        "none".into()
                    } else {
                        ranking.join(", ")
                    }
                );
                for f in &analysis.findings {
                    println!(
                        "  Article {:>2}  {:.3}  {}  {}",
                        f.article, f.confidence, f.rule_id, f.explanation
                    );
                }
            }
        }
        Command::Run {
            task,
            method,
            config,
            out_dir,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if task.is_some() {
                cfg.task = task;
            }
            if method.is_some() {
                cfg.method = method;
            }
            let dir = out_dir
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| {
                    PathBuf::from("runs").join(format!(
                        "task{}-{}",
                        cfg.task.unwrap_or(0),
                        cfg.method.map(|m| m.to_string()).unwrap_or_default()
                    ))
                });
            let out = harness::run(&cfg)?;
            let report = harness::write_outputs(&out, &cfg, &dir)?;
            let c = out.manifest.counts;
            eprintln!(
                "{} entries: {} scored, {} errored, {} skipped; outputs in {}",
                c.total,
                c.scored,
                c.errored,
                c.skipped,
                dir.display()
            );
            print!("{}", harness::emit_report(&report, ReportFormat::Markdown));
        }
        Command::Evaluate {
            predictions,
            dataset,
            corpus,
            universe,
            format,
            out,
        } => {
            let preds = harness::load_predictions(&predictions)?;
            let ds = match (dataset, corpus) {
                (Some(d), _) => Dataset::load(&d, preds.task)?.0,
                (None, Some(c)) => Dataset::from_corpus(&load_corpus(&c)?, preds.task),
                (None, None) => bail!("--dataset or --corpus is required"),
            };
            let choice = match universe {
                UniverseArg::GroundTruth => UniverseChoice::GroundTruth,
                UniverseArg::Catalog => UniverseChoice::Catalog,
            };
            let report = harness::evaluate(
                &preds,
                &ds,
                &harness::universe_for(choice, &ArticleCatalog::builtin()),
            )?;
            if let Some(p) = out {
                std::fs::write(&p, harness::emit_report(&report, ReportFormat::Structured))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            print!("{}", harness::emit_report(&report, format.into()));
        }
        Command::Report { metrics, format } => {
            let report = harness::load_report(&metrics)?;
            print!("{}", harness::emit_report(&report, format.into()));
        }
    }
    Ok(())
}
