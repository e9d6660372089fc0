//! S-expression rule conditions: `(and (CollectsData CAMERA) (not HasConsentCheck))`.

use crate::facts::DataCategory;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Atom {
        name: String,
        arg: Option<DataCategory>,
    },
    And(Vec<Expr>),
    Or(Vec<Expr>),
    Not(Box<Expr>),
}

impl Expr {
    pub fn eval(&self, holds: &dyn Fn(&str, Option<DataCategory>) -> bool) -> bool {
        match self {
            Expr::Atom { name, arg } => holds(name, *arg),
            Expr::And(xs) => xs.iter().all(|x| x.eval(holds)),
            Expr::Or(xs) => xs.iter().any(|x| x.eval(holds)),
            Expr::Not(x) => !x.eval(holds),
        }
    }

    /// Visits satisfied atoms that contribute positively to the result.
    pub fn positive_support(
        &self,
        holds: &dyn Fn(&str, Option<DataCategory>) -> bool,
        visit: &mut dyn FnMut(&str, Option<DataCategory>),
    ) {
        match self {
            Expr::Atom { name, arg } => {
                if holds(name, *arg) {
                    visit(name, *arg);
                }
            }
            Expr::And(xs) | Expr::Or(xs) => {
                for x in xs {
                    if x.eval(holds) {
                        x.positive_support(holds, visit);
                    }
                }
            }
            Expr::Not(_) => {}
        }
    }

    pub fn atoms(&self) -> Vec<(&str, Option<DataCategory>)> {
        let mut out = Vec::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms<'a>(&'a self, out: &mut Vec<(&'a str, Option<DataCategory>)>) {
        match self {
            Expr::Atom { name, arg } => out.push((name, *arg)),
            Expr::And(xs) | Expr::Or(xs) => xs.iter().for_each(|x| x.collect_atoms(out)),
            Expr::Not(x) => x.collect_atoms(out),
        }
    }

    pub fn has_negation(&self) -> bool {
        match self {
            Expr::Atom { .. } => false,
            Expr::And(xs) | Expr::Or(xs) => xs.iter().any(Expr::has_negation),
            Expr::Not(_) => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Open,
    Close,
    Word(String),
}

fn tokenize(text: &str) -> Vec<Tok> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c == '(' || c == ')' || c.is_whitespace() {
            if !word.is_empty() {
                out.push(Tok::Word(std::mem::take(&mut word)));
            }
            match c {
                '(' => out.push(Tok::Open),
                ')' => out.push(Tok::Close),
                _ => {}
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(Tok::Word(word));
    }
    out
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr, String> {
        match self.next() {
            Some(Tok::Word(w)) => atom_name(&w).map(|name| Expr::Atom { name, arg: None }),
            Some(Tok::Open) => {
                let head = match self.next() {
                    Some(Tok::Word(w)) => w,
                    _ => return Err("expected operator or predicate after `(`".into()),
                };
                match head.to_ascii_lowercase().as_str() {
                    op @ ("and" | "or" | "not") => {
                        let mut args = Vec::new();
                        while self.toks.get(self.pos) != Some(&Tok::Close) {
                            if self.pos >= self.toks.len() {
                                return Err("unbalanced parentheses".into());
                            }
                            args.push(self.expr()?);
                        }
                        self.pos += 1;
                        match op {
                            "not" if args.len() == 1 => Ok(Expr::Not(Box::new(args.remove(0)))),
                            "not" => Err(format!("`not` takes one operand, got {}", args.len())),
                            _ if args.is_empty() => Err(format!("`{op}` needs operands")),
                            "and" => Ok(Expr::And(args)),
                            _ => Ok(Expr::Or(args)),
                        }
                    }
                    _ => {
                        let name = atom_name(&head)?;
                        let arg = match self.next() {
                            Some(Tok::Word(w)) => {
                                let cat = DataCategory::parse(&w)
                                    .ok_or_else(|| format!("unknown data category `{w}`"))?;
                                match self.next() {
                                    Some(Tok::Close) => Some(cat),
                                    _ => {
                                        return Err(format!("`{name}` takes at most one argument"))
                                    }
                                }
                            }
                            Some(Tok::Close) => None,
                            _ => return Err("malformed predicate application".into()),
                        };
                        Ok(Expr::Atom { name, arg })
                    }
                }
            }
            Some(Tok::Close) => Err("unexpected `)`".into()),
            None => Err("empty expression".into()),
        }
    }
}

fn atom_name(w: &str) -> Result<String, String> {
    if w.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && w.starts_with(|c: char| c.is_ascii_alphabetic())
    {
        Ok(w.to_string())
    } else {
        Err(format!("invalid predicate name `{w}`"))
    }
}

pub fn parse_expr(text: &str) -> Result<Expr, String> {
    let mut p = Parser {
        toks: tokenize(text),
        pos: 0,
    };
    let e = p.expr()?;
    if p.pos < p.toks.len() {
        return Err("trailing input after expression".into());
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested() {
        let e = parse_expr("(and (CollectsData CAMERA) (not HasConsentCheck))").unwrap();
        assert_eq!(
            e,
            Expr::And(vec![
                Expr::Atom {
                    name: "CollectsData".into(),
                    arg: Some(DataCategory::Camera)
                },
                Expr::Not(Box::new(Expr::Atom {
                    name: "HasConsentCheck".into(),
                    arg: None
                })),
            ])
        );
        assert!(e.has_negation());
        assert_eq!(
            parse_expr("(CollectsData DEVICE_ID_DATA)").unwrap().atoms(),
            vec![("CollectsData", Some(DataCategory::DeviceId))]
        );
    }

    #[test]
    fn rejects_malformed() {
        for bad in [
            "",
            "(and",
            "(not A B)",
            "(and)",
            "A B",
            ")",
            "(P NOPE)",
            "(P A B)",
            "(1x)",
        ] {
            assert!(parse_expr(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn eval_and_support() {
        let e = parse_expr("(and A (or B C) (not D))").unwrap();
        let holds = |n: &str, _| matches!(n, "A" | "C");
        assert!(e.eval(&holds));
        let mut seen = Vec::new();
        e.positive_support(&holds, &mut |n, _| seen.push(n.to_string()));
        assert_eq!(seen, vec!["A", "C"]);
    }
}
