//! Thought/action/observation loop over three analysis tools.

use std::fmt;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::reasoner::{ChatMessage, Reasoner};
use super::{parse_model_output, InferenceConfig, MethodError, ParseMode, ParsedOutput};
use crate::corpus::Language;
use crate::engine::FormalAnalyzer;
use crate::knowledge::ArticleCatalog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tool {
    GdprLookup,
    CodeSearch,
    RuleCheck,
    Finish,
}

impl Tool {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tool::GdprLookup => "gdpr_lookup",
            Tool::CodeSearch => "code_search",
            Tool::RuleCheck => "rule_check",
            Tool::Finish => "finish",
        }
    }

    pub fn parse(s: &str) -> Option<Tool> {
        let s = s.trim().trim_end_matches("()").to_ascii_lowercase();
        [
            Tool::GdprLookup,
            Tool::CodeSearch,
            Tool::RuleCheck,
            Tool::Finish,
        ]
        .into_iter()
        .find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStep {
    pub thought: String,
    pub tool: Tool,
    pub tool_input: String,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentTrace {
    pub steps: Vec<AgentStep>,
    /// Set when the iteration cap ended the loop before `finish`.
    pub truncated: bool,
}

pub const SYSTEM_PROMPT: &str = "You are a GDPR compliance expert analyzing source code for violations. Work step by step. Each reply must use exactly this format:
Thought: <your reasoning>
Action: <gdpr_lookup | code_search | rule_check | finish>
Action Input: <input>

Tools:
- gdpr_lookup(article_id): read the definition of a GDPR article.
- code_search(keyword): list the snippet lines containing a keyword, to find sensitive APIs.
- rule_check(): run a simple static analysis over the snippet.
- finish(articles): give the violated GDPR article numbers separated by commas, or 0 if there is no violation.";

#[derive(Clone)]
pub struct Toolbox {
    catalog: Arc<ArticleCatalog>,
    analyzer: FormalAnalyzer,
}

impl Default for Toolbox {
    fn default() -> Self {
        Self::new(ArticleCatalog::builtin(), FormalAnalyzer::default())
    }
}

fn first_int() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").unwrap())
}

impl Toolbox {
    pub fn new(catalog: Arc<ArticleCatalog>, analyzer: FormalAnalyzer) -> Self {
        Self { catalog, analyzer }
    }

    pub fn execute(&self, tool: Tool, input: &str, snippet: &str, language: Language) -> String {
        match tool {
            Tool::GdprLookup => match first_int()
                .find(input)
                .and_then(|m| m.as_str().parse::<u32>().ok())
            {
                None => "expected an article number".into(),
                Some(n) => match self.catalog.lookup(n) {
                    Ok(a) => format!("{}. {}", a.meaning_line(), a.summary),
                    Err(e) => e.to_string(),
                },
            },
            Tool::CodeSearch => {
                let kw = input
                    .trim()
                    .trim_matches(|c| c == '"' || c == '\'' || c == '`');
                if kw.is_empty() {
                    return "expected a keyword".into();
                }
                let needle = kw.to_lowercase();
                let hits: Vec<String> = snippet
                    .lines()
                    .enumerate()
                    .filter(|(_, l)| l.to_lowercase().contains(&needle))
                    .map(|(i, l)| format!("line {}: {}", i + 1, l.trim()))
                    .collect();
                if hits.is_empty() {
                    format!("no matches for `{kw}`")
                } else {
                    hits.join("\n")
                }
            }
            Tool::RuleCheck => {
                let a = self.analyzer.analyze(snippet, language, None);
                if a.findings.is_empty() {
                    return "no rule findings".into();
                }
                let mut findings = a.findings;
                findings.sort_by(|x, y| {
                    y.confidence
                        .total_cmp(&x.confidence)
                        .then(x.article.cmp(&y.article))
                });
                findings
                    .iter()
                    .map(|f| {
                        format!(
                            "Article {} [{}, confidence {:.2}]: {}",
                            f.article, f.rule_id, f.confidence, f.explanation
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            Tool::Finish => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Turn {
    thought: String,
    action: Option<(Tool, String)>,
}

fn field_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*(thought|action input|action)\s*:").unwrap())
}

/// Splits a reply into its thought and action; `action` is `None` when the
/// reply is malformed or names an unknown tool.
fn parse_turn(text: &str) -> Turn {
    let marks: Vec<(String, usize, usize)> = field_re()
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            (c[1].to_ascii_lowercase(), m.start(), m.end())
        })
        .collect();
    let value = |name: &str| {
        marks
            .iter()
            .enumerate()
            .find(|(_, m)| m.0 == name)
            .map(|(i, m)| {
                let end = marks.get(i + 1).map(|n| n.1).unwrap_or(text.len());
                text[m.2..end].trim().to_string()
            })
    };
    let thought = value("thought").unwrap_or_else(|| text.trim().to_string());
    let action = value("action").and_then(|a| Tool::parse(a.lines().next().unwrap_or("")));
    let input = value("action input").unwrap_or_default();
    Turn {
        thought,
        action: action.map(|t| (t, input)),
    }
}

/// Runs the agent until `finish` or `max_iterations` steps.
///
/// A reply without a recognizable action is taken as a final answer and read
/// leniently. On the cap, the last thought is read leniently and the trace is
/// marked truncated.
pub fn react_run(
    snippet: &str,
    language: Language,
    tools: &Toolbox,
    reasoner: &dyn Reasoner,
    config: &InferenceConfig,
    max_iterations: usize,
) -> Result<(ParsedOutput, AgentTrace), MethodError> {
    if max_iterations == 0 {
        return Err(MethodError::Config(
            "max_iterations must be at least 1".into(),
        ));
    }
    let mut messages = vec![
        ChatMessage::system(SYSTEM_PROMPT),
        ChatMessage::user(format!("Code snippet:\n{snippet}")),
    ];
    let mut trace = AgentTrace::default();
    for _ in 0..max_iterations {
        let reply = match reasoner.complete(&messages, config) {
            Ok(r) => r,
            Err(source) => return Err(MethodError::Agent { source, trace }),
        };
        let turn = parse_turn(&reply);
        let (tool, input) = turn
            .action
            .clone()
            .unwrap_or_else(|| (Tool::Finish, reply.trim().to_string()));
        if tool == Tool::Finish {
            let answer = parse_model_output(&input, ParseMode::Lenient)?;
            trace.steps.push(AgentStep {
                thought: turn.thought,
                tool,
                tool_input: input,
                observation: String::new(),
            });
            return Ok((answer, trace));
        }
        let observation = tools.execute(tool, &input, snippet, language);
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(format!("Observation: {observation}")));
        trace.steps.push(AgentStep {
            thought: turn.thought,
            tool,
            tool_input: input,
            observation,
        });
    }
    trace.truncated = true;
    let last = trace.steps.last().map(|s| s.thought.as_str()).unwrap_or("");
    let answer = parse_model_output(last, ParseMode::Lenient)?;
    Ok((answer, trace))
}
