//! A closed expression language for material constraints.
//!
//! Constraints relate the sampled parameters of named parts, e.g.
//! `leaves.density < trunk.density`. The grammar is fixed:
//!
//! * numeric literals, decimal or scientific (`300`, `0.25`, `2e4`);
//! * references `part.param` with `param` one of `E`, `nu`, `density`;
//! * arithmetic `+ - * /`, comparisons `< <= > >= == !=`;
//! * boolean `and`, `or`, `not` (also spelled `&&`, `||`, `!`), parentheses.
//!
//! Precedence, loosest to tightest: `or`, `and`, comparisons, `+ -`, `* /`,
//! unary `not`/`-`; binary operators are left-associative. A unary minus on
//! a literal is folded into the literal at parse time, so parsed trees never
//! contain `Neg(Number(..))`.
//!
//! Evaluation is pure and double-precision. Both operands of `and`/`or` are
//! always evaluated (no short-circuiting), so errors such as division by
//! zero surface regardless of the surrounding boolean structure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::materials::ContinuousParams;

/// Maximum accepted input length in bytes.
pub const MAX_INPUT_BYTES: usize = 64 * 1024;

/// Maximum parenthesis/operator nesting depth.
pub const MAX_DEPTH: usize = 256;

/// Parameter key of a `part.param` reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    E,
    Nu,
    Density,
}

impl Param {
    pub fn as_str(self) -> &'static str {
        match self {
            Param::E => "E",
            Param::Nu => "nu",
            Param::Density => "density",
        }
    }

    fn from_str(s: &str) -> Option<Self> {
        match s {
            "E" => Some(Param::E),
            "nu" => Some(Param::Nu),
            "density" => Some(Param::Density),
            _ => None,
        }
    }
}

/// Binary operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinOp {
    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
            BinOp::Lt => "<",
            BinOp::Le => "<=",
            BinOp::Gt => ">",
            BinOp::Ge => ">=",
            BinOp::Eq => "==",
            BinOp::Ne => "!=",
            BinOp::And => "and",
            BinOp::Or => "or",
        }
    }
}

/// Parsed constraint expression.
#[derive(Clone, Debug, PartialEq)]
pub enum ConstraintExpr {
    Number(f64),
    Ref { part: String, param: Param },
    Not(Box<ConstraintExpr>),
    Neg(Box<ConstraintExpr>),
    Binary {
        op: BinOp,
        lhs: Box<ConstraintExpr>,
        rhs: Box<ConstraintExpr>,
    },
}

impl ConstraintExpr {
    /// Names of all parts referenced anywhere in the expression.
    pub fn referenced_parts(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_parts(&mut out);
        out
    }

    fn collect_parts<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            ConstraintExpr::Number(_) => {}
            ConstraintExpr::Ref { part, .. } => {
                out.insert(part.as_str());
            }
            ConstraintExpr::Not(inner) | ConstraintExpr::Neg(inner) => inner.collect_parts(out),
            ConstraintExpr::Binary { lhs, rhs, .. } => {
                lhs.collect_parts(out);
                rhs.collect_parts(out);
            }
        }
    }
}

/// Canonical fully-parenthesized form; [`parse`] maps it back to an equal
/// tree.
impl fmt::Display for ConstraintExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConstraintExpr::Number(v) => {
                if *v < 0.0 {
                    write!(f, "(-{})", -v)
                } else {
                    write!(f, "{v}")
                }
            }
            ConstraintExpr::Ref { part, param } => write!(f, "{part}.{}", param.as_str()),
            ConstraintExpr::Not(inner) => write!(f, "(not {inner})"),
            ConstraintExpr::Neg(inner) => write!(f, "(-{inner})"),
            ConstraintExpr::Binary { op, lhs, rhs } => {
                write!(f, "({lhs} {} {rhs})", op.symbol())
            }
        }
    }
}

/// Parse-time errors; `offset` is a byte offset into the input.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("input is {len} bytes, limit is {MAX_INPUT_BYTES}")]
    InputTooLong { len: usize },
    #[error("unexpected character {ch:?} at byte {offset}")]
    UnexpectedChar { offset: usize, ch: char },
    #[error("malformed number {text:?} at byte {offset}")]
    BadNumber { offset: usize, text: String },
    #[error("unknown parameter {name:?} at byte {offset} (expected E, nu or density)")]
    BadParam { offset: usize, name: String },
    #[error("expected {expected} at byte {offset}, found {found}")]
    UnexpectedToken {
        offset: usize,
        expected: &'static str,
        found: String,
    },
    #[error("unexpected end of input at byte {offset}, expected {expected}")]
    UnexpectedEnd { offset: usize, expected: &'static str },
    #[error("trailing input at byte {offset}")]
    TrailingInput { offset: usize },
    #[error("expression nesting exceeds depth {MAX_DEPTH} at byte {offset}")]
    TooDeep { offset: usize },
}

/// Evaluation errors; the offending subexpression is reported in canonical
/// form.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("reference to unknown part {part:?} in {expr}")]
    UnknownPart { part: String, expr: String },
    #[error("division by zero in {expr}")]
    DivisionByZero { expr: String },
    #[error("arithmetic produced a non-finite value in {expr}")]
    NonFiniteResult { expr: String },
    #[error("type error: expected {expected} in {expr}")]
    TypeMismatch { expected: &'static str, expr: String },
}

#[derive(Clone, Debug, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident(String),
    And,
    Or,
    Not,
    Plus,
    Minus,
    Star,
    Slash,
    Lt,
    Le,
    Gt,
    Ge,
    EqEq,
    Ne,
    LParen,
    RParen,
    Dot,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Number(v) => format!("number {v}"),
            TokenKind::Ident(s) => format!("identifier {s:?}"),
            other => format!("{:?}", other).to_lowercase(),
        }
    }
}

struct Token {
    kind: TokenKind,
    offset: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        let offset = i;
        match b {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
            }
            b'(' => {
                tokens.push(Token { kind: TokenKind::LParen, offset });
                i += 1;
            }
            b')' => {
                tokens.push(Token { kind: TokenKind::RParen, offset });
                i += 1;
            }
            b'.' => {
                tokens.push(Token { kind: TokenKind::Dot, offset });
                i += 1;
            }
            b'+' => {
                tokens.push(Token { kind: TokenKind::Plus, offset });
                i += 1;
            }
            b'-' => {
                tokens.push(Token { kind: TokenKind::Minus, offset });
                i += 1;
            }
            b'*' => {
                tokens.push(Token { kind: TokenKind::Star, offset });
                i += 1;
            }
            b'/' => {
                tokens.push(Token { kind: TokenKind::Slash, offset });
                i += 1;
            }
            b'<' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push(Token { kind: TokenKind::Le, offset });
                    i += 2;
                } else {
                    tokens.push(Token { kind: TokenKind::Lt, offset });
                    i += 1;
                }
            }
            b'>' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push(Token { kind: TokenKind::Ge, offset });
                    i += 2;
                } else {
                    tokens.push(Token { kind: TokenKind::Gt, offset });
                    i += 1;
                }
            }
            b'=' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push(Token { kind: TokenKind::EqEq, offset });
                    i += 2;
                } else {
                    return Err(ParseError::UnexpectedChar { offset, ch: '=' });
                }
            }
            b'!' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    tokens.push(Token { kind: TokenKind::Ne, offset });
                    i += 2;
                } else {
                    tokens.push(Token { kind: TokenKind::Not, offset });
                    i += 1;
                }
            }
            b'&' => {
                if bytes.get(i + 1) == Some(&b'&') {
                    tokens.push(Token { kind: TokenKind::And, offset });
                    i += 2;
                } else {
                    return Err(ParseError::UnexpectedChar { offset, ch: '&' });
                }
            }
            b'|' => {
                if bytes.get(i + 1) == Some(&b'|') {
                    tokens.push(Token { kind: TokenKind::Or, offset });
                    i += 2;
                } else {
                    return Err(ParseError::UnexpectedChar { offset, ch: '|' });
                }
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    // Only consume the dot as part of the number when a
                    // digit follows; `3.foo` must lex as `3` `.` `foo`.
                    if i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit() {
                        i += 1;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value: f64 = text.parse().map_err(|_| ParseError::BadNumber {
                    offset: start,
                    text: text.to_string(),
                })?;
                if !value.is_finite() {
                    return Err(ParseError::BadNumber {
                        offset: start,
                        text: text.to_string(),
                    });
                }
                tokens.push(Token {
                    kind: TokenKind::Number(value),
                    offset: start,
                });
            }
            b'A'..=b'Z' | b'a'..=b'z' | b'_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                let text = &src[start..i];
                let kind = match text {
                    "and" => TokenKind::And,
                    "or" => TokenKind::Or,
                    "not" => TokenKind::Not,
                    _ => TokenKind::Ident(text.to_string()),
                };
                tokens.push(Token { kind, offset: start });
            }
            _ => {
                let ch = src[i..].chars().next().unwrap_or('\u{fffd}');
                return Err(ParseError::UnexpectedChar { offset, ch });
            }
        }
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    end_offset: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&TokenKind> {
        self.tokens.get(self.pos).map(|t| &t.kind)
    }

    fn offset(&self) -> usize {
        self.tokens
            .get(self.pos)
            .map(|t| t.offset)
            .unwrap_or(self.end_offset)
    }

    fn advance(&mut self) -> &'a Token {
        let t = &self.tokens[self.pos];
        self.pos += 1;
        t
    }

    fn expect_end_guard(&self, depth: usize) -> Result<(), ParseError> {
        if depth > MAX_DEPTH {
            return Err(ParseError::TooDeep {
                offset: self.offset(),
            });
        }
        Ok(())
    }

    fn parse_or(&mut self, depth: usize) -> Result<ConstraintExpr, ParseError> {
        self.expect_end_guard(depth)?;
        let mut lhs = self.parse_and(depth + 1)?;
        while matches!(self.peek(), Some(TokenKind::Or)) {
            self.advance();
            let rhs = self.parse_and(depth + 1)?;
            lhs = ConstraintExpr::Binary {
                op: BinOp::Or,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn parse_and(&mut self, depth: usize) -> Result<ConstraintExpr, ParseError> {
        self.expect_end_guard(depth)?;
        let mut lhs = self.parse_cmp(depth + 1)?;
        while matches!(self.peek(), Some(TokenKind::And)) {
            self.advance();
            let rhs = self.parse_cmp(depth + 1)?;
            lhs = ConstraintExpr::Binary {
                op: BinOp::And,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn parse_cmp(&mut self, depth: usize) -> Result<ConstraintExpr, ParseError> {
        self.expect_end_guard(depth)?;
        let mut lhs = self.parse_add(depth + 1)?;
        loop {
            let op = match self.peek() {
                Some(TokenKind::Lt) => BinOp::Lt,
                Some(TokenKind::Le) => BinOp::Le,
                Some(TokenKind::Gt) => BinOp::Gt,
                Some(TokenKind::Ge) => BinOp::Ge,
                Some(TokenKind::EqEq) => BinOp::Eq,
                Some(TokenKind::Ne) => BinOp::Ne,
                _ => break,
            };
            self.advance();
            let rhs = self.parse_add(depth + 1)?;
            lhs = ConstraintExpr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn parse_add(&mut self, depth: usize) -> Result<ConstraintExpr, ParseError> {
        self.expect_end_guard(depth)?;
        let mut lhs = self.parse_mul(depth + 1)?;
        loop {
            let op = match self.peek() {
                Some(TokenKind::Plus) => BinOp::Add,
                Some(TokenKind::Minus) => BinOp::Sub,
                _ => break,
            };
            self.advance();
            let rhs = self.parse_mul(depth + 1)?;
            lhs = ConstraintExpr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn parse_mul(&mut self, depth: usize) -> Result<ConstraintExpr, ParseError> {
        self.expect_end_guard(depth)?;
        let mut lhs = self.parse_unary(depth + 1)?;
        loop {
            let op = match self.peek() {
                Some(TokenKind::Star) => BinOp::Mul,
                Some(TokenKind::Slash) => BinOp::Div,
                _ => break,
            };
            self.advance();
            let rhs = self.parse_unary(depth + 1)?;
            lhs = ConstraintExpr::Binary {
                op,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self, depth: usize) -> Result<ConstraintExpr, ParseError> {
        self.expect_end_guard(depth)?;
        match self.peek() {
            Some(TokenKind::Not) => {
                self.advance();
                let inner = self.parse_unary(depth + 1)?;
                Ok(ConstraintExpr::Not(Box::new(inner)))
            }
            Some(TokenKind::Minus) => {
                self.advance();
                let inner = self.parse_unary(depth + 1)?;
                // Fold a negated literal into the literal so the canonical
                // print/parse cycle is a fixed point.
                Ok(match inner {
                    ConstraintExpr::Number(v) => ConstraintExpr::Number(-v),
                    other => ConstraintExpr::Neg(Box::new(other)),
                })
            }
            _ => self.parse_primary(depth + 1),
        }
    }

    fn parse_primary(&mut self, depth: usize) -> Result<ConstraintExpr, ParseError> {
        self.expect_end_guard(depth)?;
        match self.peek() {
            None => Err(ParseError::UnexpectedEnd {
                offset: self.end_offset,
                expected: "a number, reference or parenthesized expression",
            }),
            Some(TokenKind::Number(_)) => {
                let t = self.advance();
                match t.kind {
                    TokenKind::Number(v) => Ok(ConstraintExpr::Number(v)),
                    _ => unreachable!(),
                }
            }
            Some(TokenKind::LParen) => {
                self.advance();
                let inner = self.parse_or(depth + 1)?;
                match self.peek() {
                    Some(TokenKind::RParen) => {
                        self.advance();
                        Ok(inner)
                    }
                    Some(other) => Err(ParseError::UnexpectedToken {
                        offset: self.offset(),
                        expected: "closing parenthesis",
                        found: other.describe(),
                    }),
                    None => Err(ParseError::UnexpectedEnd {
                        offset: self.end_offset,
                        expected: "closing parenthesis",
                    }),
                }
            }
            Some(TokenKind::Ident(_)) => {
                let t = self.advance();
                let part = match &t.kind {
                    TokenKind::Ident(s) => s.clone(),
                    _ => unreachable!(),
                };
                match self.peek() {
                    Some(TokenKind::Dot) => {
                        self.advance();
                    }
                    Some(other) => {
                        return Err(ParseError::UnexpectedToken {
                            offset: self.offset(),
                            expected: "'.' after part name",
                            found: other.describe(),
                        })
                    }
                    None => {
                        return Err(ParseError::UnexpectedEnd {
                            offset: self.end_offset,
                            expected: "'.' after part name",
                        })
                    }
                }
                let param_offset = self.offset();
                match self.peek() {
                    Some(TokenKind::Ident(_)) => {
                        let t = self.advance();
                        let name = match &t.kind {
                            TokenKind::Ident(s) => s.clone(),
                            _ => unreachable!(),
                        };
                        let param =
                            Param::from_str(&name).ok_or(ParseError::BadParam {
                                offset: param_offset,
                                name: name.clone(),
                            })?;
                        Ok(ConstraintExpr::Ref { part, param })
                    }
                    Some(other) => Err(ParseError::UnexpectedToken {
                        offset: param_offset,
                        expected: "parameter name (E, nu or density)",
                        found: other.describe(),
                    }),
                    None => Err(ParseError::UnexpectedEnd {
                        offset: self.end_offset,
                        expected: "parameter name (E, nu or density)",
                    }),
                }
            }
            Some(other) => Err(ParseError::UnexpectedToken {
                offset: self.offset(),
                expected: "a number, reference or parenthesized expression",
                found: other.describe(),
            }),
        }
    }
}

/// Parses a constraint expression. Errors report byte offsets into `text`.
pub fn parse(text: &str) -> Result<ConstraintExpr, ParseError> {
    if text.len() > MAX_INPUT_BYTES {
        return Err(ParseError::InputTooLong { len: text.len() });
    }
    let tokens = lex(text)?;
    let mut parser = Parser {
        tokens: &tokens,
        pos: 0,
        end_offset: text.len(),
    };
    let expr = parser.parse_or(0)?;
    if parser.pos != tokens.len() {
        return Err(ParseError::TrailingInput {
            offset: parser.offset(),
        });
    }
    Ok(expr)
}

#[derive(Clone, Copy, Debug)]
enum Value {
    Num(f64),
    Bool(bool),
}

fn eval_inner(
    expr: &ConstraintExpr,
    sample: &BTreeMap<String, ContinuousParams<f64>>,
) -> Result<Value, EvalError> {
    match expr {
        ConstraintExpr::Number(v) => Ok(Value::Num(*v)),
        ConstraintExpr::Ref { part, param } => {
            let params = sample.get(part).ok_or_else(|| EvalError::UnknownPart {
                part: part.clone(),
                expr: expr.to_string(),
            })?;
            Ok(Value::Num(match param {
                Param::E => params.young_modulus,
                Param::Nu => params.poisson_ratio,
                Param::Density => params.density,
            }))
        }
        ConstraintExpr::Not(inner) => match eval_inner(inner, sample)? {
            Value::Bool(b) => Ok(Value::Bool(!b)),
            Value::Num(_) => Err(EvalError::TypeMismatch {
                expected: "boolean operand for 'not'",
                expr: expr.to_string(),
            }),
        },
        ConstraintExpr::Neg(inner) => match eval_inner(inner, sample)? {
            Value::Num(v) => Ok(Value::Num(-v)),
            Value::Bool(_) => Err(EvalError::TypeMismatch {
                expected: "numeric operand for unary '-'",
                expr: expr.to_string(),
            }),
        },
        ConstraintExpr::Binary { op, lhs, rhs } => {
            let l = eval_inner(lhs, sample)?;
            let r = eval_inner(rhs, sample)?;
            match op {
                BinOp::Add | BinOp::Sub | BinOp::Mul | BinOp::Div => {
                    let (a, b) = expect_nums(l, r, expr)?;
                    if *op == BinOp::Div && b == 0.0 {
                        return Err(EvalError::DivisionByZero {
                            expr: expr.to_string(),
                        });
                    }
                    let out = match op {
                        BinOp::Add => a + b,
                        BinOp::Sub => a - b,
                        BinOp::Mul => a * b,
                        BinOp::Div => a / b,
                        _ => unreachable!(),
                    };
                    if !out.is_finite() {
                        return Err(EvalError::NonFiniteResult {
                            expr: expr.to_string(),
                        });
                    }
                    Ok(Value::Num(out))
                }
                BinOp::Lt | BinOp::Le | BinOp::Gt | BinOp::Ge | BinOp::Eq | BinOp::Ne => {
                    let (a, b) = expect_nums(l, r, expr)?;
                    Ok(Value::Bool(match op {
                        BinOp::Lt => a < b,
                        BinOp::Le => a <= b,
                        BinOp::Gt => a > b,
                        BinOp::Ge => a >= b,
                        BinOp::Eq => a == b,
                        BinOp::Ne => a != b,
                        _ => unreachable!(),
                    }))
                }
                BinOp::And | BinOp::Or => {
                    let (a, b) = match (l, r) {
                        (Value::Bool(a), Value::Bool(b)) => (a, b),
                        _ => {
                            return Err(EvalError::TypeMismatch {
                                expected: "boolean operands",
                                expr: expr.to_string(),
                            })
                        }
                    };
                    Ok(Value::Bool(match op {
                        BinOp::And => a && b,
                        BinOp::Or => a || b,
                        _ => unreachable!(),
                    }))
                }
            }
        }
    }
}

fn expect_nums(l: Value, r: Value, expr: &ConstraintExpr) -> Result<(f64, f64), EvalError> {
    match (l, r) {
        (Value::Num(a), Value::Num(b)) => Ok((a, b)),
        _ => Err(EvalError::TypeMismatch {
            expected: "numeric operands",
            expr: expr.to_string(),
        }),
    }
}

/// Evaluates a constraint against a joint parameter sample. The expression
/// must reduce to a boolean.
pub fn evaluate(
    expr: &ConstraintExpr,
    sample: &BTreeMap<String, ContinuousParams<f64>>,
) -> Result<bool, EvalError> {
    match eval_inner(expr, sample)? {
        Value::Bool(b) => Ok(b),
        Value::Num(_) => Err(EvalError::TypeMismatch {
            expected: "a boolean expression at top level",
            expr: expr.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, ContinuousParams<f64>> {
        let mut m = BTreeMap::new();
        m.insert(
            "leaves".to_string(),
            ContinuousParams::new(2e4, 0.4, 200.0).unwrap(),
        );
        m.insert(
            "trunk".to_string(),
            ContinuousParams::new(2e6, 0.4, 400.0).unwrap(),
        );
        m
    }

    #[test]
    fn precedence_matches_canonical_form() {
        // `not` binds tighter than any binary operator, so negating a
        // comparison needs parentheses.
        let expr = parse("1 + 2 * 3 < 4 and 5 < 6 or not 7 < 8").unwrap();
        assert_eq!(
            expr.to_string(),
            "((((1 + (2 * 3)) < 4) and (5 < 6)) or ((not 7) < 8))"
        );
        let expr = parse("not (7 < 8)").unwrap();
        assert_eq!(expr.to_string(), "(not (7 < 8))");
    }

    #[test]
    fn operators_are_left_associative() {
        assert_eq!(parse("1 - 2 - 3").unwrap().to_string(), "((1 - 2) - 3)");
        assert_eq!(parse("8 / 4 / 2").unwrap().to_string(), "((8 / 4) / 2)");
    }

    #[test]
    fn scientific_literals() {
        assert_eq!(parse("2e4").unwrap(), ConstraintExpr::Number(2e4));
        assert_eq!(parse("1.5e-3").unwrap(), ConstraintExpr::Number(1.5e-3));
        assert_eq!(parse("0.25").unwrap(), ConstraintExpr::Number(0.25));
        assert!(matches!(
            parse("1e999"),
            Err(ParseError::BadNumber { offset: 0, .. })
        ));
    }

    #[test]
    fn symbolic_boolean_spellings() {
        let a = parse("leaves.E < 1 && trunk.E < 1 || !(leaves.nu > 0)").unwrap();
        let b = parse("leaves.E < 1 and trunk.E < 1 or not (leaves.nu > 0)").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_literals_fold() {
        assert_eq!(parse("-5").unwrap(), ConstraintExpr::Number(-5.0));
        assert_eq!(parse("- - 5").unwrap(), ConstraintExpr::Number(5.0));
        // Unary minus over a reference stays a Neg node.
        let expr = parse("-leaves.E").unwrap();
        assert!(matches!(expr, ConstraintExpr::Neg(_)));
    }

    #[test]
    fn errors_carry_byte_offsets() {
        assert_eq!(
            parse("leaves.q < 1"),
            Err(ParseError::BadParam {
                offset: 7,
                name: "q".to_string()
            })
        );
        assert!(matches!(
            parse("leaves.E <"),
            Err(ParseError::UnexpectedEnd { offset: 10, .. })
        ));
        assert!(matches!(
            parse("leaves.E $ 1"),
            Err(ParseError::UnexpectedChar { offset: 9, ch: '$' })
        ));
        assert!(matches!(
            parse("1 2"),
            Err(ParseError::TrailingInput { offset: 2 })
        ));
    }

    #[test]
    fn evaluates_reference_comparison() {
        let expr = parse("leaves.density < trunk.density").unwrap();
        assert!(evaluate(&expr, &sample()).unwrap());
        let expr = parse("leaves.density > trunk.density").unwrap();
        assert!(!evaluate(&expr, &sample()).unwrap());
    }

    #[test]
    fn exact_equality_on_doubles() {
        let expr = parse("leaves.E == leaves.E").unwrap();
        assert!(evaluate(&expr, &sample()).unwrap());
        let expr = parse("leaves.nu == 0.4").unwrap();
        assert!(evaluate(&expr, &sample()).unwrap());
    }

    #[test]
    fn division_by_zero_is_an_error_not_false() {
        let expr = parse("leaves.E / (leaves.nu - leaves.nu) > 0").unwrap();
        match evaluate(&expr, &sample()) {
            Err(EvalError::DivisionByZero { expr }) => {
                assert_eq!(expr, "(leaves.E / (leaves.nu - leaves.nu))");
            }
            other => panic!("expected division error, got {other:?}"),
        }
        // Not short-circuited away by a surrounding conjunction.
        let expr = parse("1 > 2 and leaves.E / 0 > 0").unwrap();
        assert!(matches!(
            evaluate(&expr, &sample()),
            Err(EvalError::DivisionByZero { .. })
        ));
    }

    #[test]
    fn type_errors() {
        let expr = parse("(leaves.E < trunk.E) + 1").unwrap();
        assert!(matches!(
            evaluate(&expr, &sample()),
            Err(EvalError::TypeMismatch { .. })
        ));
        let expr = parse("leaves.E + 1").unwrap();
        assert!(matches!(
            evaluate(&expr, &sample()),
            Err(EvalError::TypeMismatch { .. })
        ));
        let expr = parse("not leaves.E").unwrap();
        assert!(matches!(
            evaluate(&expr, &sample()),
            Err(EvalError::TypeMismatch { .. })
        ));
    }

    #[test]
    fn unknown_part_is_an_error() {
        let expr = parse("roots.E < 1").unwrap();
        assert!(matches!(
            evaluate(&expr, &sample()),
            Err(EvalError::UnknownPart { .. })
        ));
    }

    #[test]
    fn canonical_print_reparses_to_equal_tree() {
        for text in [
            "leaves.density < trunk.density",
            "1 + 2 * 3 < 4 and 5 < 6 or not 7 < 8",
            "-leaves.E * 2 <= trunk.E / 4",
            "(leaves.nu >= 0.15) and (leaves.nu <= 0.45) or leaves.E != 2e4",
            "-0.5 < leaves.nu",
        ] {
            let ast = parse(text).unwrap();
            let printed = ast.to_string();
            let reparsed = parse(&printed).unwrap();
            assert_eq!(ast, reparsed, "canonical form {printed:?} changed shape");
            assert_eq!(printed, reparsed.to_string());
        }
    }

    #[test]
    fn depth_limit_and_size_limit() {
        let deep = format!("{}1{}", "(".repeat(300), ")".repeat(300));
        assert!(matches!(parse(&deep), Err(ParseError::TooDeep { .. })));
        let long = "1".repeat(MAX_INPUT_BYTES + 1);
        assert!(matches!(
            parse(&long),
            Err(ParseError::InputTooLong { .. })
        ));
    }
}
