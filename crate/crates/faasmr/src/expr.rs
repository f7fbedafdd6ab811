//! The worker-side expression language.
//!
//! Mapper scripts ship as text and are parsed at the worker, so the engine
//! stays generic: any expression over the dataset columns (plus user helper
//! functions shipped alongside) can be evaluated without redeploying the
//! worker. Semantics are IEEE doubles with a boolean type for filters.
//!
//! Precedence, tightest first: unary `- !`; `* / %`; `+ -`;
//! `< <= > >= == !=`; `&&`; `||`. All binary operators associate left.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinaryOp {
    fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Rem => "%",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::And => "&&",
            BinaryOp::Or => "||",
        }
    }

    /// Binding power for parsing and printing; higher binds tighter.
    fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge | BinaryOp::Eq | BinaryOp::Ne => 3,
            BinaryOp::Add | BinaryOp::Sub => 4,
            BinaryOp::Mul | BinaryOp::Div | BinaryOp::Rem => 5,
        }
    }
}

pub const UNARY_PRECEDENCE: u8 = 6;

/// Builtin functions available to every expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Builtin {
    Sqrt,
    Abs,
    Min,
    Max,
    Pow,
    Exp,
    Log,
    Sin,
    Cos,
}

impl Builtin {
    pub fn lookup(name: &str) -> Option<Builtin> {
        Some(match name {
            "sqrt" => Builtin::Sqrt,
            "abs" => Builtin::Abs,
            "min" => Builtin::Min,
            "max" => Builtin::Max,
            "pow" => Builtin::Pow,
            "exp" => Builtin::Exp,
            "log" => Builtin::Log,
            "sin" => Builtin::Sin,
            "cos" => Builtin::Cos,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Sqrt => "sqrt",
            Builtin::Abs => "abs",
            Builtin::Min => "min",
            Builtin::Max => "max",
            Builtin::Pow => "pow",
            Builtin::Exp => "exp",
            Builtin::Log => "log",
            Builtin::Sin => "sin",
            Builtin::Cos => "cos",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Builtin::Min | Builtin::Max | Builtin::Pow => 2,
            _ => 1,
        }
    }

    pub fn apply(self, args: &[f64]) -> f64 {
        match self {
            Builtin::Sqrt => args[0].sqrt(),
            Builtin::Abs => args[0].abs(),
            Builtin::Min => args[0].min(args[1]),
            Builtin::Max => args[0].max(args[1]),
            Builtin::Pow => args[0].powf(args[1]),
            Builtin::Exp => args[0].exp(),
            Builtin::Log => args[0].ln(),
            Builtin::Sin => args[0].sin(),
            Builtin::Cos => args[0].cos(),
        }
    }
}

/// Parsed expression tree. Identifiers are still names here; resolution to
/// column/parameter slots happens when a graph is typechecked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Number(f64),
    /// Column reference, or parameter reference inside a helper body.
    Ident(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// Call of a builtin or user-defined helper.
    Call(String, Vec<Expr>),
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Number(_) | Expr::Ident(_) | Expr::Call(..) => 7,
            Expr::Unary(..) => UNARY_PRECEDENCE,
            Expr::Binary(op, ..) => op.precedence(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Number(n) => {
                if n.fract() == 0.0 && n.abs() < 1e15 {
                    write!(f, "{n:.1}")
                } else {
                    write!(f, "{n}")
                }
            }
            Expr::Ident(name) => write!(f, "{name}"),
            Expr::Unary(op, e) => {
                let sym = match op {
                    UnaryOp::Neg => "-",
                    UnaryOp::Not => "!",
                };
                if e.precedence() < UNARY_PRECEDENCE {
                    write!(f, "{sym}({e})")
                } else {
                    write!(f, "{sym}{e}")
                }
            }
            Expr::Binary(op, l, r) => {
                let p = op.precedence();
                if l.precedence() < p {
                    write!(f, "({l})")?;
                } else {
                    write!(f, "{l}")?;
                }
                write!(f, " {} ", op.symbol())?;
                // Left-associative: right child at equal precedence needs parens.
                if r.precedence() <= p {
                    write!(f, "({r})")
                } else {
                    write!(f, "{r}")
                }
            }
            Expr::Call(name, args) => {
                write!(f, "{name}(")?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// User-defined helper shipped in the payload headers or declared inline.
/// Bodies may reference only the helper's own parameters and builtins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelperFunction {
    pub name: String,
    pub params: Vec<String>,
    pub body: Expr,
}

impl fmt::Display for HelperFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "def {}({}) = {};", self.name, self.params.join(", "), self.body)
    }
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Percent,
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
    Ne,
    AndAnd,
    OrOr,
    Not,
    LParen,
    RParen,
    Comma,
    Semi,
    /// `=` (helper definitions only).
    Assign,
    Colon,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tok::Number(n) => return write!(f, "number {n}"),
            Tok::Ident(s) => return write!(f, "identifier {s:?}"),
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
            Tok::Percent => "%",
            Tok::Lt => "<",
            Tok::Le => "<=",
            Tok::Gt => ">",
            Tok::Ge => ">=",
            Tok::EqEq => "==",
            Tok::Ne => "!=",
            Tok::AndAnd => "&&",
            Tok::OrOr => "||",
            Tok::Not => "!",
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::Comma => ",",
            Tok::Semi => ";",
            Tok::Assign => "=",
            Tok::Colon => ":",
            Tok::Eof => "end of input",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpannedTok {
    pub tok: Tok,
    pub pos: Pos,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("parse error at {pos}: {message}")]
pub struct ParseError {
    pub pos: Pos,
    pub message: String,
    /// Human-readable description of what would have been accepted.
    pub expected: Vec<String>,
}

impl ParseError {
    fn new(pos: Pos, message: impl Into<String>, expected: &[&str]) -> Self {
        Self {
            pos,
            message: message.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }
}

pub fn lex(src: &str) -> Result<Vec<SpannedTok>, ParseError> {
    let mut out = Vec::new();
    let mut chars = src.chars().peekable();
    let mut line = 1u32;
    let mut col = 1u32;

    macro_rules! bump {
        () => {{
            let c = chars.next();
            if let Some(ch) = c {
                if ch == '\n' {
                    line += 1;
                    col = 1;
                } else {
                    col += 1;
                }
            }
            c
        }};
    }

    loop {
        let pos = Pos { line, col };
        let Some(&c) = chars.peek() else {
            out.push(SpannedTok { tok: Tok::Eof, pos });
            return Ok(out);
        };
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                bump!();
            }
            '#' => {
                // Comment to end of line.
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump!();
                }
            }
            '0'..='9' | '.' => {
                let mut text = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_digit() || c == '.' {
                        text.push(c);
                        bump!();
                    } else if (c == 'e' || c == 'E')
                        && !text.is_empty()
                        && text.bytes().all(|b| b.is_ascii_digit() || b == b'.')
                    {
                        text.push(c);
                        bump!();
                        if let Some(&s) = chars.peek() {
                            if s == '+' || s == '-' {
                                text.push(s);
                                bump!();
                            }
                        }
                    } else {
                        break;
                    }
                }
                let value: f64 = text
                    .parse()
                    .map_err(|_| ParseError::new(pos, format!("invalid number {text:?}"), &["number"]))?;
                out.push(SpannedTok { tok: Tok::Number(value), pos });
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut name = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        name.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                out.push(SpannedTok { tok: Tok::Ident(name), pos });
            }
            _ => {
                bump!();
                let tok = match c {
                    '+' => Tok::Plus,
                    '-' => Tok::Minus,
                    '*' => Tok::Star,
                    '/' => Tok::Slash,
                    '%' => Tok::Percent,
                    '(' => Tok::LParen,
                    ')' => Tok::RParen,
                    ',' => Tok::Comma,
                    ';' => Tok::Semi,
                    ':' => Tok::Colon,
                    '<' => {
                        if chars.peek() == Some(&'=') {
                            bump!();
                            Tok::Le
                        } else {
                            Tok::Lt
                        }
                    }
                    '>' => {
                        if chars.peek() == Some(&'=') {
                            bump!();
                            Tok::Ge
                        } else {
                            Tok::Gt
                        }
                    }
                    '=' => {
                        if chars.peek() == Some(&'=') {
                            bump!();
                            Tok::EqEq
                        } else {
                            Tok::Assign
                        }
                    }
                    '!' => {
                        if chars.peek() == Some(&'=') {
                            bump!();
                            Tok::Ne
                        } else {
                            Tok::Not
                        }
                    }
                    '&' => {
                        if chars.peek() == Some(&'&') {
                            bump!();
                            Tok::AndAnd
                        } else {
                            return Err(ParseError::new(pos, "stray '&'", &["&&"]));
                        }
                    }
                    '|' => {
                        if chars.peek() == Some(&'|') {
                            bump!();
                            Tok::OrOr
                        } else {
                            return Err(ParseError::new(pos, "stray '|'", &["||"]));
                        }
                    }
                    other => {
                        return Err(ParseError::new(
                            pos,
                            format!("unexpected character {other:?}"),
                            &["expression"],
                        ))
                    }
                };
                out.push(SpannedTok { tok, pos });
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parser (Pratt, over the token stream)
// ---------------------------------------------------------------------------

pub struct TokenCursor {
    toks: Vec<SpannedTok>,
    pos: usize,
}

impl TokenCursor {
    pub fn new(toks: Vec<SpannedTok>) -> Self {
        Self { toks, pos: 0 }
    }

    pub fn peek(&self) -> &SpannedTok {
        &self.toks[self.pos.min(self.toks.len() - 1)]
    }

    pub fn next(&mut self) -> SpannedTok {
        let t = self.toks[self.pos.min(self.toks.len() - 1)].clone();
        if self.pos < self.toks.len() - 1 {
            self.pos += 1;
        }
        t
    }

    pub fn at_eof(&self) -> bool {
        self.peek().tok == Tok::Eof
    }

    pub fn expect(&mut self, want: &Tok, expected: &str) -> Result<SpannedTok, ParseError> {
        let t = self.peek().clone();
        if &t.tok == want {
            Ok(self.next())
        } else {
            Err(ParseError::new(
                t.pos,
                format!("expected {expected}, found {}", t.tok),
                &[expected],
            ))
        }
    }

    pub fn expect_ident(&mut self, what: &str) -> Result<(String, Pos), ParseError> {
        let t = self.peek().clone();
        match t.tok {
            Tok::Ident(name) => {
                self.next();
                Ok((name, t.pos))
            }
            other => Err(ParseError::new(t.pos, format!("expected {what}, found {other}"), &[what])),
        }
    }
}

fn binary_op_of(tok: &Tok) -> Option<BinaryOp> {
    Some(match tok {
        Tok::Plus => BinaryOp::Add,
        Tok::Minus => BinaryOp::Sub,
        Tok::Star => BinaryOp::Mul,
        Tok::Slash => BinaryOp::Div,
        Tok::Percent => BinaryOp::Rem,
        Tok::Lt => BinaryOp::Lt,
        Tok::Le => BinaryOp::Le,
        Tok::Gt => BinaryOp::Gt,
        Tok::Ge => BinaryOp::Ge,
        Tok::EqEq => BinaryOp::Eq,
        Tok::Ne => BinaryOp::Ne,
        Tok::AndAnd => BinaryOp::And,
        Tok::OrOr => BinaryOp::Or,
        _ => return None,
    })
}

/// Parse an expression with the given minimum binding power.
pub fn parse_expr_bp(cur: &mut TokenCursor, min_bp: u8) -> Result<Expr, ParseError> {
    let t = cur.next();
    let mut lhs = match t.tok {
        Tok::Number(n) => Expr::Number(n),
        Tok::Ident(name) => {
            if cur.peek().tok == Tok::LParen {
                cur.next();
                let mut args = Vec::new();
                if cur.peek().tok != Tok::RParen {
                    loop {
                        args.push(parse_expr_bp(cur, 1)?);
                        if cur.peek().tok == Tok::Comma {
                            cur.next();
                        } else {
                            break;
                        }
                    }
                }
                cur.expect(&Tok::RParen, ")")?;
                Expr::Call(name, args)
            } else {
                Expr::Ident(name)
            }
        }
        Tok::Minus => Expr::Unary(UnaryOp::Neg, Box::new(parse_expr_bp(cur, UNARY_PRECEDENCE)?)),
        Tok::Not => Expr::Unary(UnaryOp::Not, Box::new(parse_expr_bp(cur, UNARY_PRECEDENCE)?)),
        Tok::LParen => {
            let inner = parse_expr_bp(cur, 1)?;
            cur.expect(&Tok::RParen, ")")?;
            inner
        }
        other => {
            return Err(ParseError::new(
                t.pos,
                format!("expected expression, found {other}"),
                &["number", "identifier", "(", "-", "!"],
            ))
        }
    };

    loop {
        let Some(op) = binary_op_of(&cur.peek().tok) else { break };
        let bp = op.precedence();
        if bp < min_bp {
            break;
        }
        cur.next();
        // Left associativity: parse the right side at one level tighter.
        let rhs = parse_expr_bp(cur, bp + 1)?;
        lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
    }
    Ok(lhs)
}

/// Parse a complete standalone expression; trailing input is an error.
pub fn parse_expr(src: &str) -> Result<Expr, ParseError> {
    let mut cur = TokenCursor::new(lex(src)?);
    let e = parse_expr_bp(&mut cur, 1)?;
    if !cur.at_eof() {
        let t = cur.peek();
        return Err(ParseError::new(
            t.pos,
            format!("unexpected trailing {}", t.tok),
            &["end of input"],
        ));
    }
    Ok(e)
}

/// Parse a `def name(p, ...) = expr;` helper definition.
pub fn parse_helper(cur: &mut TokenCursor) -> Result<HelperFunction, ParseError> {
    let (kw, pos) = cur.expect_ident("def")?;
    if kw != "def" {
        return Err(ParseError::new(pos, format!("expected def, found {kw}"), &["def"]));
    }
    let (name, _) = cur.expect_ident("helper name")?;
    cur.expect(&Tok::LParen, "(")?;
    let mut params = Vec::new();
    if cur.peek().tok != Tok::RParen {
        loop {
            let (p, _) = cur.expect_ident("parameter name")?;
            params.push(p);
            if cur.peek().tok == Tok::Comma {
                cur.next();
            } else {
                break;
            }
        }
    }
    cur.expect(&Tok::RParen, ")")?;
    cur.expect(&Tok::Assign, "=")?;
    let body = parse_expr_bp(cur, 1)?;
    cur.expect(&Tok::Semi, ";")?;
    Ok(HelperFunction { name, params, body })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Num(f64),
    Bool(bool),
}

impl Value {
    pub fn as_num(self) -> f64 {
        match self {
            Value::Num(n) => n,
            Value::Bool(_) => panic!("boolean used in numeric context after typecheck"),
        }
    }

    pub fn as_bool(self) -> bool {
        match self {
            Value::Bool(b) => b,
            Value::Num(_) => panic!("number used in boolean context after typecheck"),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("unknown identifier {0:?}")]
    UnknownIdent(String),
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("function {0:?} called with {1} args, expects {2}")]
    Arity(String, usize, usize),
    #[error("type error: {0}")]
    Type(String),
    #[error("NaN produced in strict mode by {0}")]
    StrictNan(String),
}

/// Name-resolution scope used by the tree-walking evaluator.
pub trait Scope {
    fn lookup(&self, name: &str) -> Option<f64>;
}

impl Scope for &[(&str, f64)] {
    fn lookup(&self, name: &str) -> Option<f64> {
        self.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

impl Scope for std::collections::BTreeMap<String, f64> {
    fn lookup(&self, name: &str) -> Option<f64> {
        self.get(name).copied()
    }
}

/// Evaluate a parsed expression against a row scope and a helper set.
///
/// This is the reference evaluator: the executor uses a slot-compiled form
/// for speed, but both implement the same semantics. NaN propagates unless
/// `strict` is set, in which case defines/filters surface it as an error.
pub fn eval_expr<S: Scope>(
    e: &Expr,
    scope: &S,
    helpers: &[HelperFunction],
    strict: bool,
) -> Result<Value, EvalError> {
    let v = eval_rec(e, scope, helpers)?;
    if strict {
        if let Value::Num(n) = v {
            if n.is_nan() {
                return Err(EvalError::StrictNan(e.to_string()));
            }
        }
    }
    Ok(v)
}

fn eval_rec<S: Scope>(e: &Expr, scope: &S, helpers: &[HelperFunction]) -> Result<Value, EvalError> {
    Ok(match e {
        Expr::Number(n) => Value::Num(*n),
        Expr::Ident(name) => Value::Num(
            scope
                .lookup(name)
                .ok_or_else(|| EvalError::UnknownIdent(name.clone()))?,
        ),
        Expr::Unary(op, inner) => {
            let v = eval_rec(inner, scope, helpers)?;
            match op {
                UnaryOp::Neg => Value::Num(-num(v)?),
                UnaryOp::Not => Value::Bool(!boolean(v)?),
            }
        }
        Expr::Binary(op, l, r) => {
            use BinaryOp::*;
            match op {
                And => {
                    // Short-circuit.
                    if !boolean(eval_rec(l, scope, helpers)?)? {
                        Value::Bool(false)
                    } else {
                        Value::Bool(boolean(eval_rec(r, scope, helpers)?)?)
                    }
                }
                Or => {
                    if boolean(eval_rec(l, scope, helpers)?)? {
                        Value::Bool(true)
                    } else {
                        Value::Bool(boolean(eval_rec(r, scope, helpers)?)?)
                    }
                }
                _ => {
                    let a = num(eval_rec(l, scope, helpers)?)?;
                    let b = num(eval_rec(r, scope, helpers)?)?;
                    match op {
                        Add => Value::Num(a + b),
                        Sub => Value::Num(a - b),
                        Mul => Value::Num(a * b),
                        Div => Value::Num(a / b),
                        Rem => Value::Num(a % b),
                        Lt => Value::Bool(a < b),
                        Le => Value::Bool(a <= b),
                        Gt => Value::Bool(a > b),
                        Ge => Value::Bool(a >= b),
                        Eq => Value::Bool(a == b),
                        Ne => Value::Bool(a != b),
                        And | Or => unreachable!(),
                    }
                }
            }
        }
        Expr::Call(name, args) => {
            let mut vals = Vec::with_capacity(args.len());
            for a in args {
                vals.push(num(eval_rec(a, scope, helpers)?)?);
            }
            if let Some(b) = Builtin::lookup(name) {
                if vals.len() != b.arity() {
                    return Err(EvalError::Arity(name.clone(), vals.len(), b.arity()));
                }
                Value::Num(b.apply(&vals))
            } else if let Some(h) = helpers.iter().find(|h| &h.name == name) {
                if vals.len() != h.params.len() {
                    return Err(EvalError::Arity(name.clone(), vals.len(), h.params.len()));
                }
                // Helper bodies see only their own parameters.
                let scope: Vec<(&str, f64)> = h
                    .params
                    .iter()
                    .map(String::as_str)
                    .zip(vals.iter().copied())
                    .collect();
                eval_rec(&h.body, &scope.as_slice(), &[])?
            } else {
                return Err(EvalError::UnknownFunction(name.clone()));
            }
        }
    })
}

fn num(v: Value) -> Result<f64, EvalError> {
    match v {
        Value::Num(n) => Ok(n),
        Value::Bool(_) => Err(EvalError::Type("expected number, got boolean".into())),
    }
}

fn boolean(v: Value) -> Result<bool, EvalError> {
    match v {
        Value::Bool(b) => Ok(b),
        Value::Num(_) => Err(EvalError::Type("expected boolean, got number".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eval_closed(src: &str) -> Value {
        let e = parse_expr(src).unwrap();
        let scope: &[(&str, f64)] = &[];
        eval_expr(&e, &scope, &[], false).unwrap()
    }

    #[test]
    fn precedence_mul_over_add() {
        assert_eq!(eval_closed("1+2*3"), Value::Num(7.0));
        assert_eq!(eval_closed("(1+2)*3"), Value::Num(9.0));
    }

    #[test]
    fn comparison_and_logic() {
        let e = parse_expr("pt > 20 && abs(eta) < 2.4").unwrap();
        let scope: &[(&str, f64)] = &[("pt", 25.0), ("eta", -1.0)];
        assert_eq!(eval_expr(&e, &scope, &[], false).unwrap(), Value::Bool(true));
        let scope: &[(&str, f64)] = &[("pt", 25.0), ("eta", -3.0)];
        assert_eq!(eval_expr(&e, &scope, &[], false).unwrap(), Value::Bool(false));
    }

    #[test]
    fn error_at_end_of_input() {
        let err = parse_expr("pt >").unwrap_err();
        assert_eq!(err.pos, Pos { line: 1, col: 5 });
    }

    #[test]
    fn error_carries_position_and_expectations() {
        let err = parse_expr("1 + )").unwrap_err();
        assert_eq!(err.pos, Pos { line: 1, col: 5 });
        assert!(!err.expected.is_empty());
    }

    #[test]
    fn helper_by_substitution() {
        let h = HelperFunction {
            name: "sq".into(),
            params: vec!["a".into()],
            body: parse_expr("a*a").unwrap(),
        };
        let e = parse_expr("sq(3)").unwrap();
        let scope: &[(&str, f64)] = &[];
        assert_eq!(eval_expr(&e, &scope, &[h], false).unwrap(), Value::Num(9.0));
    }

    #[test]
    fn division_by_zero_follows_ieee() {
        let e = parse_expr("x / 0").unwrap();
        let scope: &[(&str, f64)] = &[("x", 1.0)];
        assert_eq!(eval_expr(&e, &scope, &[], false).unwrap(), Value::Num(f64::INFINITY));
    }

    #[test]
    fn nested_builtins() {
        assert_eq!(eval_closed("min(2, pow(2,3))"), Value::Num(2.0));
    }

    #[test]
    fn nan_propagates_by_default_errors_in_strict() {
        let e = parse_expr("sqrt(0.0 - 1.0)").unwrap();
        let scope: &[(&str, f64)] = &[];
        match eval_expr(&e, &scope, &[], false).unwrap() {
            Value::Num(n) => assert!(n.is_nan()),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            eval_expr(&e, &scope, &[], true),
            Err(EvalError::StrictNan(_))
        ));
    }

    #[test]
    fn unary_binds_tighter_than_mul() {
        assert_eq!(eval_closed("-2 * 3"), Value::Num(-6.0));
        assert_eq!(eval_closed("2 - -3"), Value::Num(5.0));
    }

    #[test]
    fn left_associativity() {
        assert_eq!(eval_closed("8 - 4 - 2"), Value::Num(2.0));
        assert_eq!(eval_closed("16 / 4 / 2"), Value::Num(2.0));
    }

    // Random expression generator for the parse/print round-trip property.
    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..1000).prop_map(|n| Expr::Number(f64::from(n) / 8.0)),
            prop_oneof![Just("x"), Just("col_a"), Just("b2")].prop_map(|s| Expr::Ident(s.into())),
        ];
        leaf.prop_recursive(5, 64, 3, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone(), arb_binop())
                    .prop_map(|(l, r, op)| Expr::Binary(op, Box::new(l), Box::new(r))),
                inner.clone().prop_map(|e| Expr::Unary(UnaryOp::Neg, Box::new(e))),
                (inner.clone(), inner.clone())
                    .prop_map(|(a, b)| Expr::Call("min".into(), vec![a, b])),
                inner.prop_map(|a| Expr::Call("sqrt".into(), vec![a])),
            ]
        })
    }

    fn arb_binop() -> impl Strategy<Value = BinaryOp> {
        prop_oneof![
            Just(BinaryOp::Add),
            Just(BinaryOp::Sub),
            Just(BinaryOp::Mul),
            Just(BinaryOp::Div),
            Just(BinaryOp::Rem),
            Just(BinaryOp::Lt),
            Just(BinaryOp::Le),
        ]
    }

    proptest! {
        #[test]
        fn parse_print_round_trip(e in arb_expr()) {
            let printed = e.to_string();
            let back = parse_expr(&printed).unwrap();
            prop_assert_eq!(back, e);
        }
    }
}
