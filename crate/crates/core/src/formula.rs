//! Arithmetic expression parser and evaluator for derived-metric formulas.
//!
//! Grammar: infix arithmetic over identifiers and decimal literals with
//! `+ - * / ^`, parentheses, unary minus, and the functions `log`, `exp`,
//! `sin`, `sqrt`. Identifiers match `[A-Za-z_][A-Za-z0-9_]*`; whitespace is
//! insignificant. `^` is right-associative and binds tighter than unary
//! minus. `log` is the natural logarithm.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormulaError {
    #[error("parse error at position {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unbound name `{0}`")]
    Unbound(String),
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Log,
    Exp,
    Sin,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Log => "log",
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        match name {
            "log" => Some(Func::Log),
            "exp" => Some(Func::Exp),
            "sin" => Some(Func::Sin),
            "sqrt" => Some(Func::Sqrt),
            _ => None,
        }
    }
}

/// Parsed expression tree.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Parse an expression. Errors carry the byte offset of the offending token.
pub fn parse(text: &str) -> Result<Expr, FormulaError> {
    let tokens = tokenize(text)?;
    let mut p = Parser { tokens, pos: 0 };
    let expr = p.expression(0)?;
    match p.peek() {
        Token::End => Ok(expr),
        t => Err(FormulaError::Parse {
            pos: p.peek_pos(),
            msg: format!("unexpected `{t}`"),
        }),
    }
}

impl Expr {
    /// Evaluate against a binding lookup. Division by zero and domain errors
    /// (log of non-positive, sqrt of negative, non-finite results) are
    /// reported as errors rather than returned as NaN/infinity.
    pub fn eval(&self, bindings: &mut dyn FnMut(&str) -> Option<f64>) -> Result<f64, FormulaError> {
        let v = match self {
            Expr::Num(n) => *n,
            Expr::Var(name) => bindings(name).ok_or_else(|| FormulaError::Unbound(name.clone()))?,
            Expr::Neg(e) => -e.eval(bindings)?,
            Expr::Bin(op, a, b) => {
                let a = a.eval(bindings)?;
                let b = b.eval(bindings)?;
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(FormulaError::Domain("division by zero".into()));
                        }
                        a / b
                    }
                    BinOp::Pow => {
                        let r = a.powf(b);
                        if r.is_nan() && !a.is_nan() && !b.is_nan() {
                            return Err(FormulaError::Domain(format!(
                                "{a} ^ {b} is undefined over the reals"
                            )));
                        }
                        r
                    }
                }
            }
            Expr::Call(f, arg) => {
                let x = arg.eval(bindings)?;
                match f {
                    Func::Log => {
                        if x <= 0.0 {
                            return Err(FormulaError::Domain(format!("log of {x}")));
                        }
                        x.ln()
                    }
                    Func::Exp => x.exp(),
                    Func::Sin => x.sin(),
                    Func::Sqrt => {
                        if x < 0.0 {
                            return Err(FormulaError::Domain(format!("sqrt of {x}")));
                        }
                        x.sqrt()
                    }
                }
            }
        };
        if !v.is_finite() {
            return Err(FormulaError::Domain("non-finite result".into()));
        }
        Ok(v)
    }

    /// Every variable name referenced anywhere in the expression.
    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(name) => {
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
            Expr::Neg(e) => e.collect_vars(out),
            Expr::Bin(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Call(_, a) => a.collect_vars(out),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Bin(BinOp::Pow, ..) => 4,
            _ => 5,
        }
    }
}

/// Printing parenthesizes exactly where re-parsing needs it, so
/// print-then-parse reproduces the tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(n) => write!(f, "{n}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(e) => {
                if e.precedence() < 3 {
                    write!(f, "-({e})")
                } else {
                    write!(f, "-{e}")
                }
            }
            Expr::Bin(op, a, b) => {
                let (sym, prec, right_assoc) = match op {
                    BinOp::Add => ("+", 1, false),
                    BinOp::Sub => ("-", 1, false),
                    BinOp::Mul => ("*", 2, false),
                    BinOp::Div => ("/", 2, false),
                    BinOp::Pow => ("^", 4, true),
                };
                let (need_l, need_r) = if right_assoc {
                    (a.precedence() <= prec, b.precedence() < prec)
                } else {
                    (a.precedence() < prec, b.precedence() <= prec)
                };
                if need_l {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " {sym} ")?;
                if need_r {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    End,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Num(n) => write!(f, "{n}"),
            Token::Ident(s) => write!(f, "{s}"),
            Token::Plus => write!(f, "+"),
            Token::Minus => write!(f, "-"),
            Token::Star => write!(f, "*"),
            Token::Slash => write!(f, "/"),
            Token::Caret => write!(f, "^"),
            Token::LParen => write!(f, "("),
            Token::RParen => write!(f, ")"),
            Token::End => write!(f, "end of input"),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>, FormulaError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\r' | '\n' => i += 1,
            '+' => push1(&mut out, Token::Plus, &mut i),
            '-' => push1(&mut out, Token::Minus, &mut i),
            '*' => push1(&mut out, Token::Star, &mut i),
            '/' => push1(&mut out, Token::Slash, &mut i),
            '^' => push1(&mut out, Token::Caret, &mut i),
            '(' => push1(&mut out, Token::LParen, &mut i),
            ')' => push1(&mut out, Token::RParen, &mut i),
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                // optional exponent part
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let lit = &text[start..i];
                let n: f64 = lit.parse().map_err(|_| FormulaError::Parse {
                    pos: start,
                    msg: format!("bad number literal `{lit}`"),
                })?;
                out.push((Token::Num(n), start));
            }
            'A'..='Z' | 'a'..='z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && matches!(bytes[i] as char, 'A'..='Z' | 'a'..='z' | '0'..='9' | '_')
                {
                    i += 1;
                }
                out.push((Token::Ident(text[start..i].to_string()), start));
            }
            _ => {
                return Err(FormulaError::Parse {
                    pos: i,
                    msg: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    out.push((Token::End, text.len()));
    Ok(out)
}

fn push1(out: &mut Vec<(Token, usize)>, t: Token, i: &mut usize) {
    out.push((t, *i));
    *i += 1;
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos].0
    }

    fn peek_pos(&self) -> usize {
        self.tokens[self.pos].1
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].0.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    /// Pratt loop. `min_prec` is the binding floor for binary operators.
    fn expression(&mut self, min_prec: u8) -> Result<Expr, FormulaError> {
        let mut lhs = self.prefix()?;
        loop {
            let (op, prec, right_assoc) = match self.peek() {
                Token::Plus => (BinOp::Add, 1, false),
                Token::Minus => (BinOp::Sub, 1, false),
                Token::Star => (BinOp::Mul, 2, false),
                Token::Slash => (BinOp::Div, 2, false),
                Token::Caret => (BinOp::Pow, 4, true),
                _ => break,
            };
            if prec < min_prec {
                break;
            }
            self.advance();
            let next_min = if right_assoc { prec } else { prec + 1 };
            let rhs = self.expression(next_min)?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn prefix(&mut self) -> Result<Expr, FormulaError> {
        let pos = self.peek_pos();
        match self.advance() {
            Token::Num(n) => Ok(Expr::Num(n)),
            Token::Ident(name) => {
                if *self.peek() == Token::LParen {
                    let func = Func::from_name(&name).ok_or_else(|| FormulaError::Parse {
                        pos,
                        msg: format!("unknown function `{name}`"),
                    })?;
                    self.advance(); // (
                    let arg = self.expression(0)?;
                    self.expect_rparen()?;
                    Ok(Expr::Call(func, Box::new(arg)))
                } else {
                    Ok(Expr::Var(name))
                }
            }
            Token::Minus => {
                // unary minus binds tighter than * but looser than ^
                let inner = self.expression(4)?;
                Ok(Expr::Neg(Box::new(inner)))
            }
            Token::LParen => {
                let inner = self.expression(0)?;
                self.expect_rparen()?;
                Ok(inner)
            }
            t => Err(FormulaError::Parse {
                pos,
                msg: format!("expected a value, found `{t}`"),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), FormulaError> {
        if *self.peek() == Token::RParen {
            self.advance();
            Ok(())
        } else {
            Err(FormulaError::Parse {
                pos: self.peek_pos(),
                msg: format!("expected `)`, found `{}`", self.peek()),
            })
        }
    }
}

/// Convenience: parse and evaluate in one step.
pub fn evaluate(
    text: &str,
    bindings: &mut dyn FnMut(&str) -> Option<f64>,
) -> Result<f64, FormulaError> {
    parse(text)?.eval(bindings)
}
