//! Token-level frontend for Java and Kotlin.
//!
//! Unlike the lexical fallback this frontend ignores comments, string contents
//! and import lines when matching API names, skips method declarations, spans
//! class declarations over their bodies, and recognizes consent checks inside
//! `if`/`when`/`while` conditions.

use std::sync::OnceLock;

use regex::Regex;

use super::{
    regex_line_facts, table_fact, url_fact, Fact, FactKind, Frontend, MatchMode, PatternTable,
};
use crate::corpus::{Language, SpanRef};

#[derive(Debug, Clone, PartialEq, Eq)]
enum TokKind {
    Ident(String),
    Str(String),
    Punct(char),
    Number,
}

#[derive(Debug, Clone)]
struct Tok {
    kind: TokKind,
    line: usize,
}

impl Tok {
    fn ident(&self) -> Option<&str> {
        match &self.kind {
            TokKind::Ident(s) => Some(s),
            _ => None,
        }
    }

    fn is_punct(&self, c: char) -> bool {
        self.kind == TokKind::Punct(c)
    }
}

struct Lexed {
    tokens: Vec<Tok>,
    /// Source with comments blanked out, line structure preserved.
    code: String,
}

fn lex(source: &str, nested_comments: bool) -> Result<Lexed, String> {
    let chars: Vec<char> = source.chars().collect();
    let mut code = String::with_capacity(source.len());
    let mut tokens = Vec::new();
    let mut line = 1;
    let mut i = 0;
    let blank = |c: char, code: &mut String| code.push(if c == '\n' { '\n' } else { ' ' });

    while i < chars.len() {
        let c = chars[i];
        let next = chars.get(i + 1).copied();
        if c == '/' && next == Some('/') {
            while i < chars.len() && chars[i] != '\n' {
                blank(chars[i], &mut code);
                i += 1;
            }
            continue;
        }
        if c == '/' && next == Some('*') {
            let start_line = line;
            let mut depth = 0usize;
            loop {
                if i >= chars.len() {
                    return Err(format!("unterminated block comment from line {start_line}"));
                }
                if chars[i] == '/'
                    && chars.get(i + 1) == Some(&'*')
                    && (depth == 0 || nested_comments)
                {
                    depth += 1;
                    code.push_str("  ");
                    i += 2;
                    continue;
                }
                if chars[i] == '*' && chars.get(i + 1) == Some(&'/') {
                    depth -= 1;
                    code.push_str("  ");
                    i += 2;
                    if depth == 0 {
                        break;
                    }
                    continue;
                }
                if chars[i] == '\n' {
                    line += 1;
                }
                blank(chars[i], &mut code);
                i += 1;
            }
            continue;
        }
        if c == '"' {
            let start_line = line;
            let triple = chars.get(i + 1) == Some(&'"') && chars.get(i + 2) == Some(&'"');
            let mut content = String::new();
            if triple {
                code.push_str("\"\"\"");
                i += 3;
                loop {
                    if i >= chars.len() {
                        return Err(format!("unterminated text block from line {start_line}"));
                    }
                    if chars[i] == '"'
                        && chars.get(i + 1) == Some(&'"')
                        && chars.get(i + 2) == Some(&'"')
                    {
                        code.push_str("\"\"\"");
                        i += 3;
                        break;
                    }
                    if chars[i] == '\n' {
                        line += 1;
                    }
                    content.push(chars[i]);
                    code.push(chars[i]);
                    i += 1;
                }
            } else {
                code.push('"');
                i += 1;
                loop {
                    match chars.get(i) {
                        None | Some('\n') => {
                            return Err(format!("unterminated string on line {start_line}"))
                        }
                        Some('\\') => {
                            content.push('\\');
                            code.push('\\');
                            if let Some(&e) = chars.get(i + 1) {
                                content.push(e);
                                code.push(e);
                            }
                            i += 2;
                        }
                        Some('"') => {
                            code.push('"');
                            i += 1;
                            break;
                        }
                        Some(&ch) => {
                            content.push(ch);
                            code.push(ch);
                            i += 1;
                        }
                    }
                }
            }
            tokens.push(Tok {
                kind: TokKind::Str(content),
                line: start_line,
            });
            continue;
        }
        if c == '\'' {
            // char literal
            let mut j = i + 1;
            while j < chars.len() && chars[j] != '\'' && chars[j] != '\n' {
                if chars[j] == '\\' {
                    j += 1;
                }
                j += 1;
            }
            if j >= chars.len() || chars[j] == '\n' {
                return Err(format!("unterminated char literal on line {line}"));
            }
            for &ch in &chars[i..=j] {
                code.push(ch);
            }
            tokens.push(Tok {
                kind: TokKind::Number,
                line,
            });
            i = j + 1;
            continue;
        }
        if c.is_alphabetic() || c == '_' || c == '$' {
            let start = i;
            while i < chars.len()
                && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '$')
            {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            code.push_str(&word);
            tokens.push(Tok {
                kind: TokKind::Ident(word),
                line,
            });
            continue;
        }
        if c.is_ascii_digit() {
            while i < chars.len()
                && (chars[i].is_alphanumeric() || chars[i] == '.' || chars[i] == '_')
            {
                code.push(chars[i]);
                i += 1;
            }
            tokens.push(Tok {
                kind: TokKind::Number,
                line,
            });
            continue;
        }
        if c == '\n' {
            line += 1;
        }
        code.push(c);
        if !c.is_whitespace() {
            tokens.push(Tok {
                kind: TokKind::Punct(c),
                line,
            });
        }
        i += 1;
    }
    Ok(Lexed { tokens, code })
}

fn condition_ident_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)consent|granted|permitted|authori[sz]ed|optedin|opt_in|agreed").unwrap()
    })
}

const DECL_KEYWORDS: [&str; 4] = ["class", "interface", "enum", "object"];

/// Structural frontend shared by Java and Kotlin (C-family token grammar).
#[derive(Debug, Clone)]
pub struct CFamilyFrontend {
    name: &'static str,
    nested_comments: bool,
}

impl CFamilyFrontend {
    pub fn java() -> Self {
        Self {
            name: "java-structural",
            nested_comments: false,
        }
    }

    pub fn kotlin() -> Self {
        Self {
            name: "kotlin-structural",
            nested_comments: true,
        }
    }
}

impl Frontend for CFamilyFrontend {
    fn name(&self) -> &str {
        self.name
    }

    fn extract(
        &self,
        source: &str,
        language: Language,
        table: &PatternTable,
    ) -> Result<Vec<Fact>, String> {
        let Lexed { tokens, code } = lex(source, self.nested_comments)?;
        let mut out = Vec::new();
        let skip_lines = import_lines(&tokens);
        let last_line = source.lines().count().max(1);

        identifier_matches(&tokens, &skip_lines, language, table, &mut out);
        class_decls(&tokens, language, last_line, &mut out);
        condition_guards(&tokens, language, &mut out);

        for t in &tokens {
            if let TokKind::Str(s) = &t.kind {
                let lower = s.to_ascii_lowercase();
                if ["http://", "https://", "ws://", "wss://", "ftp://"]
                    .iter()
                    .any(|p| lower.starts_with(p))
                    && !s.contains(char::is_whitespace)
                {
                    out.push(url_fact(s, t.line, language));
                }
            }
        }
        for (idx, text) in code.lines().enumerate() {
            if !skip_lines.contains(&(idx + 1)) {
                regex_line_facts(table, text, idx + 1, language, &mut out);
            }
        }
        Ok(out)
    }
}

fn import_lines(tokens: &[Tok]) -> Vec<usize> {
    let mut lines = Vec::new();
    let mut prev_line = 0;
    for t in tokens {
        if t.line != prev_line {
            if matches!(t.ident(), Some("import") | Some("package")) {
                lines.push(t.line);
            }
            prev_line = t.line;
        }
    }
    lines
}

fn identifier_matches(
    tokens: &[Tok],
    skip_lines: &[usize],
    language: Language,
    table: &PatternTable,
    out: &mut Vec<Fact>,
) {
    for (i, tok) in tokens.iter().enumerate() {
        let Some(name) = tok.ident() else { continue };
        if skip_lines.contains(&tok.line) {
            continue;
        }
        for p in &table.patterns {
            if p.spec.mode != MatchMode::Identifier || !p.applies_to(language) {
                continue;
            }
            if !matches_segments(tokens, i, &p.segments, name) {
                continue;
            }
            let is_call = tokens.get(i + 1).is_some_and(|t| t.is_punct('('));
            if is_call && is_declaration(tokens, i + 2 - p.segments.len() * 2) {
                continue;
            }
            let start = receiver_start(tokens, i);
            let detail = tokens[start..=i]
                .iter()
                .map(|t| match &t.kind {
                    TokKind::Ident(s) => s.as_str(),
                    _ => ".",
                })
                .collect::<String>();
            out.push(table_fact(
                p,
                p.segments.last().unwrap(),
                &detail,
                tok.line,
                language,
            ));
        }
    }
}

fn matches_segments(tokens: &[Tok], end: usize, segments: &[String], last: &str) -> bool {
    if segments.last().map(String::as_str) != Some(last) {
        return false;
    }
    let n = segments.len();
    if end + 2 < 2 * n {
        return false;
    }
    (1..n).all(|k| {
        let ident_at = end - 2 * k;
        tokens[ident_at + 1].is_punct('.')
            && tokens[ident_at].ident() == Some(segments[n - 1 - k].as_str())
    })
}

/// Walks back over `a.b.c` qualification preceding token `end`.
fn receiver_start(tokens: &[Tok], end: usize) -> usize {
    let mut start = end;
    while start >= 2 && tokens[start - 1].is_punct('.') && tokens[start - 2].ident().is_some() {
        start -= 2;
    }
    start
}

/// `Type name(` or `fun name(`: a method declaration rather than a call.
fn is_declaration(tokens: &[Tok], name_idx: usize) -> bool {
    if name_idx == 0 {
        return false;
    }
    let prev = &tokens[name_idx - 1];
    match prev.ident() {
        Some("fun") | Some("void") => true,
        Some(
            "new" | "return" | "else" | "throw" | "await" | "in" | "is" | "as" | "and" | "or"
            | "case" | "yield" | "do",
        ) => false,
        Some(_) => true,
        None => {
            prev.is_punct('>') && name_idx >= 2 && tokens[name_idx - 2].ident().is_some() && {
                // generic return type `List<String> name(`
                tokens[..name_idx]
                    .iter()
                    .rev()
                    .take(8)
                    .any(|t| t.is_punct('<'))
            }
        }
    }
}

fn class_decls(tokens: &[Tok], language: Language, last_line: usize, out: &mut Vec<Fact>) {
    for (i, tok) in tokens.iter().enumerate() {
        let Some(kw) = tok.ident() else { continue };
        if !DECL_KEYWORDS.contains(&kw) {
            continue;
        }
        if i > 0 && (tokens[i - 1].is_punct('.') || tokens[i - 1].is_punct(':')) {
            continue;
        }
        let Some(name) = tokens.get(i + 1).and_then(Tok::ident) else {
            continue;
        };
        if !name.starts_with(|c: char| c.is_uppercase()) {
            continue;
        }
        let end_line = body_end(tokens, i + 2).unwrap_or(tok.line).min(last_line);
        out.push(Fact {
            kind: FactKind::ClassDecl,
            symbol: name.to_string(),
            detail: format!("{kw} {name}"),
            span: SpanRef::new(tok.line, end_line.max(tok.line)).expect("ordered span"),
            language,
            data_category: None,
            tag: None,
            contextual: false,
        });
    }
}

/// Line of the `}` closing the first body opened after `from`, if the
/// declaration has one before its statement ends.
fn body_end(tokens: &[Tok], from: usize) -> Option<usize> {
    let mut paren = 0i32;
    let mut i = from;
    while i < tokens.len() {
        let t = &tokens[i];
        match t.kind {
            TokKind::Punct('(') => paren += 1,
            TokKind::Punct(')') => paren -= 1,
            TokKind::Punct(';') if paren == 0 => return None,
            TokKind::Punct('{') if paren == 0 => break,
            _ => {}
        }
        if paren == 0 && i > from && t.ident().is_some_and(|s| DECL_KEYWORDS.contains(&s)) {
            return None;
        }
        i += 1;
    }
    if i >= tokens.len() {
        return None;
    }
    let mut depth = 0i32;
    for t in &tokens[i..] {
        match t.kind {
            TokKind::Punct('{') => depth += 1,
            TokKind::Punct('}') => {
                depth -= 1;
                if depth == 0 {
                    return Some(t.line);
                }
            }
            _ => {}
        }
    }
    // unterminated body in a fragment: runs to the end
    tokens.last().map(|t| t.line)
}

fn condition_guards(tokens: &[Tok], language: Language, out: &mut Vec<Fact>) {
    let mut i = 0;
    while i < tokens.len() {
        let is_cond = matches!(tokens[i].ident(), Some("if") | Some("while") | Some("when"))
            && tokens.get(i + 1).is_some_and(|t| t.is_punct('('));
        if !is_cond {
            i += 1;
            continue;
        }
        let mut depth = 0i32;
        let mut j = i + 1;
        while j < tokens.len() {
            match tokens[j].kind {
                TokKind::Punct('(') => depth += 1,
                TokKind::Punct(')') => {
                    depth -= 1;
                    if depth == 0 {
                        break;
                    }
                }
                _ => {}
            }
            if let Some(name) = tokens[j].ident() {
                let line = tokens[j].line;
                let already = out
                    .iter()
                    .any(|f| f.kind == FactKind::ConsentGuard && f.span.start_line == line);
                if !already && condition_ident_re().is_match(name) {
                    out.push(Fact {
                        kind: FactKind::ConsentGuard,
                        symbol: name.to_string(),
                        detail: format!("{} condition", tokens[i].ident().unwrap()),
                        span: SpanRef::line(line).unwrap(),
                        language,
                        data_category: None,
                        tag: None,
                        contextual: false,
                    });
                }
            }
            j += 1;
        }
        i += 1;
    }
}
