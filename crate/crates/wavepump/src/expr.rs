//! Tiny arithmetic expression parser for custom phases and forces.
//!
//! Grammar (recursive descent, f64 arithmetic):
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := unary (('*'|'/') unary)*
//! unary  := '-' unary | factor
//! factor := primary ('^' unary)?         right-associative power
//! primary:= number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! Exponentiation binds tighter than unary minus (`-y^2` is `-(y^2)`),
//! matching the usual mathematical convention.
//!
//! Supported functions: `sin`, `cos`, `exp`. Variables are declared by the
//! caller; anything else is rejected at parse time so config typos surface
//! early rather than as NaN fields.

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Neg(Box<Node>),
    Sin(Box<Node>),
    Cos(Box<Node>),
    Exp(Box<Node>),
}

/// A parsed expression over a fixed set of variables.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    vars: Vec<String>,
}

impl Expr {
    /// Parses `src` with the given variable names (e.g. `["t2", "x2"]`).
    pub fn parse(src: &str, vars: &[&str]) -> Result<Expr> {
        let tokens = lex(src)?;
        let mut p = Parser { tokens, pos: 0, vars };
        let root = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(Error::Expr(format!(
                "trailing input at token {} in '{}'",
                p.pos, src
            )));
        }
        Ok(Expr {
            root,
            vars: vars.iter().map(|s| s.to_string()).collect(),
        })
    }

    /// Evaluates with values bound to variables in declaration order.
    pub fn eval(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.vars.len());
        eval_node(&self.root, values)
    }
}

fn eval_node(n: &Node, v: &[f64]) -> f64 {
    match n {
        Node::Num(c) => *c,
        Node::Var(i) => v[*i],
        Node::Add(a, b) => eval_node(a, v) + eval_node(b, v),
        Node::Sub(a, b) => eval_node(a, v) - eval_node(b, v),
        Node::Mul(a, b) => eval_node(a, v) * eval_node(b, v),
        Node::Div(a, b) => eval_node(a, v) / eval_node(b, v),
        Node::Pow(a, b) => eval_node(a, v).powf(eval_node(b, v)),
        Node::Neg(a) => -eval_node(a, v),
        Node::Sin(a) => eval_node(a, v).sin(),
        Node::Cos(a) => eval_node(a, v).cos(),
        Node::Exp(a) => eval_node(a, v).exp(),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let bytes = src.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            '-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            '*' => {
                out.push(Tok::Star);
                i += 1;
            }
            '/' => {
                out.push(Tok::Slash);
                i += 1;
            }
            '^' => {
                out.push(Tok::Caret);
                i += 1;
            }
            '(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            ')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_digit()
                        || bytes[i] == b'.'
                        || bytes[i] == b'e'
                        || bytes[i] == b'E'
                        || ((bytes[i] == b'+' || bytes[i] == b'-')
                            && i > start
                            && (bytes[i - 1] == b'e' || bytes[i - 1] == b'E')))
                {
                    i += 1;
                }
                let text = &src[start..i];
                let value = text
                    .parse::<f64>()
                    .map_err(|_| Error::Expr(format!("bad number '{}'", text)))?;
                out.push(Tok::Num(value));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push(Tok::Ident(src[start..i].to_string()));
            }
            _ => return Err(Error::Expr(format!("unexpected character '{}'", c))),
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<Tok>,
    pos: usize,
    vars: &'a [&'a str],
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: Tok) -> Result<()> {
        match self.bump() {
            Some(got) if got == t => Ok(()),
            other => Err(Error::Expr(format!("expected {:?}, got {:?}", t, other))),
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if let Some(Tok::Minus) = self.peek() {
            self.bump();
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        self.factor()
    }

    fn factor(&mut self) -> Result<Node> {
        let base = self.primary()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            // Right-associative; the exponent may carry its own sign.
            let exp = self.unary()?;
            return Ok(Node::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node> {
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Node::Num(v)),
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => {
                if let Some(Tok::LParen) = self.peek() {
                    self.bump();
                    let arg = self.expr()?;
                    self.expect(Tok::RParen)?;
                    let arg = Box::new(arg);
                    match name.as_str() {
                        "sin" => Ok(Node::Sin(arg)),
                        "cos" => Ok(Node::Cos(arg)),
                        "exp" => Ok(Node::Exp(arg)),
                        _ => Err(Error::Expr(format!("unknown function '{}'", name))),
                    }
                } else if let Some(idx) = self.vars.iter().position(|v| *v == name) {
                    Ok(Node::Var(idx))
                } else {
                    Err(Error::Expr(format!(
                        "unknown variable '{}' (expected one of {:?})",
                        name, self.vars
                    )))
                }
            }
            other => Err(Error::Expr(format!("unexpected token {:?}", other))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(src: &str, t2: f64, x2: f64) -> f64 {
        Expr::parse(src, &["t2", "x2"]).unwrap().eval(&[t2, x2])
    }

    #[test]
    fn arithmetic_and_precedence() {
        assert_eq!(ev("1 + 2*3", 0.0, 0.0), 7.0);
        assert_eq!(ev("(1 + 2)*3", 0.0, 0.0), 9.0);
        assert_eq!(ev("2^3^2", 0.0, 0.0), 512.0); // right associative
        assert_eq!(ev("-2^2", 0.0, 0.0), -4.0); // power binds tighter than neg
        assert_eq!(ev("2^-2", 0.0, 0.0), 0.25);
        assert_eq!(ev("exp(-t2^2)", 2.0, 0.0), (-4.0f64).exp());
        assert_eq!(ev("6/3/2", 0.0, 0.0), 1.0);
    }

    #[test]
    fn variables_and_functions() {
        assert_eq!(ev("t2^2/2 + 0.1*x2", 3.0, 10.0), 5.5);
        let v = ev("sin(t2) + cos(x2) + exp(0)", 0.5, 0.25);
        assert!((v - (0.5f64.sin() + 0.25f64.cos() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn scientific_notation() {
        assert_eq!(ev("1e-2 + 2.5E+1", 0.0, 0.0), 25.01);
    }

    #[test]
    fn rejects_unknowns() {
        assert!(Expr::parse("t3 + 1", &["t2", "x2"]).is_err());
        assert!(Expr::parse("tan(t2)", &["t2", "x2"]).is_err());
        assert!(Expr::parse("1 +", &["t2", "x2"]).is_err());
        assert!(Expr::parse("(1", &["t2", "x2"]).is_err());
    }
}
