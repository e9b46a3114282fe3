//! Expression trees over covariates: evaluation with protected semantics,
//! size, fully parenthesized rendering, canonical forms and an infix parser.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSchema;
use crate::error::{Error, Result};

pub const MAX_FEATURES: usize = 3;
pub const MAX_NODES_PER_FEATURE: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Square,
    Le,
    Eq,
    Not,
    And,
    Or,
}

impl Op {
    pub const ALL: [Op; 10] = [
        Op::Add,
        Op::Sub,
        Op::Mul,
        Op::Div,
        Op::Square,
        Op::Le,
        Op::Eq,
        Op::Not,
        Op::And,
        Op::Or,
    ];

    pub fn arity(self) -> usize {
        match self {
            Op::Square | Op::Not => 1,
            _ => 2,
        }
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, Op::Add | Op::Mul | Op::Eq | Op::And | Op::Or)
    }

    fn infix(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Sub => "-",
            Op::Mul => "*",
            Op::Div => "/",
            Op::Le => "<=",
            Op::Eq => "=",
            Op::And => " AND ",
            Op::Or => " OR ",
            Op::Square | Op::Not => unreachable!("unary operator"),
        }
    }

    pub fn apply_unary(self, a: f64) -> f64 {
        if !a.is_finite() {
            return f64::NAN;
        }
        match self {
            Op::Square => a * a,
            Op::Not => bool_value(a == 0.0),
            _ => unreachable!("binary operator applied to one operand"),
        }
    }

    pub fn apply_binary(self, a: f64, b: f64) -> f64 {
        if !a.is_finite() || !b.is_finite() {
            return f64::NAN;
        }
        match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
            Op::Div => {
                if b == 0.0 {
                    1.0
                } else {
                    a / b
                }
            }
            Op::Le => bool_value(a <= b),
            Op::Eq => bool_value(a == b),
            Op::And => bool_value(a != 0.0 && b != 0.0),
            Op::Or => bool_value(a != 0.0 || b != 0.0),
            Op::Square | Op::Not => unreachable!("unary operator applied to two operands"),
        }
    }
}

fn bool_value(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    /// Covariate by schema column index.
    Var(usize),
    Const(f64),
    Unary(Op, Box<Expr>),
    Binary(Op, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn unary(op: Op, a: Expr) -> Self {
        Expr::Unary(op, Box::new(a))
    }

    pub fn binary(op: Op, a: Expr, b: Expr) -> Self {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn size(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) => 1,
            Expr::Unary(_, a) => 1 + a.size(),
            Expr::Binary(_, a, b) => 1 + a.size() + b.size(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) => 1,
            Expr::Unary(_, a) => 1 + a.depth(),
            Expr::Binary(_, a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    pub fn variables(&self, out: &mut BTreeSet<usize>) {
        match self {
            Expr::Var(j) => {
                out.insert(*j);
            }
            Expr::Const(_) => {}
            Expr::Unary(_, a) => a.variables(out),
            Expr::Binary(_, a, b) => {
                a.variables(out);
                b.variables(out);
            }
        }
    }

    pub fn evaluate_row(&self, row: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(match self {
            Expr::Var(j) => *row.get(*j).ok_or_else(|| unresolved(*j))?,
            Expr::Const(c) => *c,
            Expr::Unary(op, a) => op.apply_unary(a.evaluate_row(row)?),
            Expr::Binary(op, a, b) => op.apply_binary(a.evaluate_row(row)?, b.evaluate_row(row)?),
        })
    }

    /// Evaluate on every row of `x` at once.
    pub fn evaluate(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(match self {
            Expr::Var(j) => {
                if *j >= x.ncols() {
                    return Err(unresolved(*j));
                }
                x.column(*j).to_vec()
            }
            Expr::Const(c) => vec![*c; x.nrows()],
            Expr::Unary(op, a) => {
                let mut v = a.evaluate(x)?;
                v.iter_mut().for_each(|e| *e = op.apply_unary(*e));
                v
            }
            Expr::Binary(op, a, b) => {
                let mut v = a.evaluate(x)?;
                let w = b.evaluate(x)?;
                v.iter_mut().zip(w).for_each(|(e, f)| *e = op.apply_binary(*e, f));
                v
            }
        })
    }

    /// Fully parenthesized infix text; parses back to the same tree.
    pub fn render(&self, schema: &FeatureSchema) -> String {
        let mut s = String::new();
        self.write(schema, false, &mut s);
        s
    }

    /// Rendering with the operands of commutative operators sorted, so
    /// `(b+a)` and `(a+b)` coincide.
    pub fn canonical(&self, schema: &FeatureSchema) -> String {
        let mut s = String::new();
        self.write(schema, true, &mut s);
        s
    }

    fn write(&self, schema: &FeatureSchema, canonical: bool, out: &mut String) {
        match self {
            Expr::Var(j) => match schema.covariates.get(*j) {
                Some(c) => out.push_str(&c.name),
                None => {
                    let _ = write!(out, "<x{j}>");
                }
            },
            Expr::Const(c) => {
                if c.is_sign_negative() {
                    let _ = write!(out, "({c})");
                } else {
                    let _ = write!(out, "{c}");
                }
            }
            Expr::Unary(Op::Square, a) => {
                out.push('(');
                a.write(schema, canonical, out);
                out.push_str("^2)");
            }
            Expr::Unary(_, a) => {
                out.push_str("NOT(");
                a.write(schema, canonical, out);
                out.push(')');
            }
            Expr::Binary(op, a, b) => {
                let (mut left, mut right) = (String::new(), String::new());
                a.write(schema, canonical, &mut left);
                b.write(schema, canonical, &mut right);
                if canonical && op.is_commutative() && right < left {
                    std::mem::swap(&mut left, &mut right);
                }
                out.push('(');
                out.push_str(&left);
                out.push_str(op.infix());
                out.push_str(&right);
                out.push(')');
            }
        }
    }

    /// Canonical renderings of every subtree with at least two nodes.
    pub fn subexpressions(&self, schema: &FeatureSchema) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_subexpressions(schema, &mut out);
        out
    }

    fn collect_subexpressions(&self, schema: &FeatureSchema, out: &mut Vec<String>) {
        match self {
            Expr::Var(_) | Expr::Const(_) => {}
            Expr::Unary(_, a) => {
                out.push(self.canonical(schema));
                a.collect_subexpressions(schema, out);
            }
            Expr::Binary(_, a, b) => {
                out.push(self.canonical(schema));
                a.collect_subexpressions(schema, out);
                b.collect_subexpressions(schema, out);
            }
        }
    }
}

fn unresolved(j: usize) -> Error {
    Error::UnknownIdentifier(format!("covariate #{j}"))
}

/// One to three engineered features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub features: Vec<Expr>,
}

impl FeatureSet {
    pub fn new(features: Vec<Expr>) -> Result<Self> {
        if features.is_empty() || features.len() > MAX_FEATURES {
            return Err(Error::InvalidInput(format!(
                "a feature set holds 1 to {MAX_FEATURES} features, got {}",
                features.len()
            )));
        }
        if let Some(f) = features.iter().find(|f| f.size() > MAX_NODES_PER_FEATURE) {
            return Err(Error::InvalidInput(format!(
                "feature with {} nodes exceeds the {MAX_NODES_PER_FEATURE}-node bound",
                f.size()
            )));
        }
        Ok(Self { features })
    }

    /// Identity features: one per covariate. Exempt from the size bounds.
    pub fn identity(n_covariates: usize) -> Self {
        Self {
            features: (0..n_covariates).map(Expr::Var).collect(),
        }
    }

    pub fn parse(texts: &[impl AsRef<str>], schema: &FeatureSchema) -> Result<Self> {
        let features = texts
            .iter()
            .map(|t| parse_expression(t.as_ref(), schema))
            .collect::<Result<Vec<_>>>()?;
        Self::new(features)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Total node count across features.
    pub fn complexity(&self) -> usize {
        self.features.iter().map(Expr::size).sum()
    }

    pub fn variables(&self) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for f in &self.features {
            f.variables(&mut out);
        }
        out
    }

    pub fn render(&self, schema: &FeatureSchema) -> Vec<String> {
        self.features.iter().map(|f| f.render(schema)).collect()
    }

    /// Key identifying the set up to commutative reordering within features.
    pub fn canonical_key(&self, schema: &FeatureSchema) -> String {
        self.features
            .iter()
            .map(|f| f.canonical(schema))
            .collect::<Vec<_>>()
            .join(" ; ")
    }

    /// Engineered feature matrix, one column per feature.
    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.features.len()));
        for (k, f) in self.features.iter().enumerate() {
            let v = f.evaluate(x)?;
            out.column_mut(k).assign(&ndarray::ArrayView1::from(&v));
        }
        Ok(out)
    }
}

/// Total size of a feature set; same as [`FeatureSet::complexity`].
pub fn feature_complexity(fs: &FeatureSet) -> usize {
    fs.complexity()
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    Le,
    Eq,
    Not,
    And,
    Or,
    LParen,
    RParen,
    End,
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut k = 0;
    let syntax = |position: usize, message: String| Error::Syntax { position, message };
    while k < chars.len() {
        let (pos, c) = chars[k];
        let single = match c {
            ' ' | '\t' | '\n' | '\r' => {
                k += 1;
                continue;
            }
            '+' => Some(Token::Plus),
            '-' | '−' => Some(Token::Minus),
            '*' | '×' | '·' => Some(Token::Star),
            '/' | '÷' => Some(Token::Slash),
            '^' => Some(Token::Caret),
            '≤' => Some(Token::Le),
            '=' => Some(Token::Eq),
            '~' | '¬' | '!' => Some(Token::Not),
            '(' => Some(Token::LParen),
            ')' => Some(Token::RParen),
            _ => None,
        };
        if let Some(tok) = single {
            // `==` is accepted as `=`
            if tok == Token::Eq && chars.get(k + 1).map(|x| x.1) == Some('=') {
                k += 1;
            }
            out.push((tok, pos));
            k += 1;
            continue;
        }
        if c == '<' {
            if chars.get(k + 1).map(|x| x.1) == Some('=') {
                out.push((Token::Le, pos));
                k += 2;
                continue;
            }
            return Err(syntax(pos, "expected `<=`".into()));
        }
        if c == '&' || c == '|' {
            let tok = if c == '&' { Token::And } else { Token::Or };
            k += if chars.get(k + 1).map(|x| x.1) == Some(c) { 2 } else { 1 };
            out.push((tok, pos));
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let start = k;
            while k < chars.len() && (chars[k].1.is_ascii_digit() || chars[k].1 == '.') {
                k += 1;
            }
            if k < chars.len() && matches!(chars[k].1, 'e' | 'E') {
                let mut j = k + 1;
                if j < chars.len() && matches!(chars[j].1, '+' | '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].1.is_ascii_digit() {
                    k = j;
                    while k < chars.len() && chars[k].1.is_ascii_digit() {
                        k += 1;
                    }
                }
            }
            let end = chars.get(k).map_or(text.len(), |x| x.0);
            let lit = &text[pos..end];
            let v = lit
                .parse::<f64>()
                .map_err(|_| syntax(chars[start].0, format!("malformed number `{lit}`")))?;
            out.push((Token::Number(v), pos));
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            while k < chars.len() && (chars[k].1.is_alphanumeric() || chars[k].1 == '_') {
                k += 1;
            }
            let end = chars.get(k).map_or(text.len(), |x| x.0);
            let word = &text[pos..end];
            let tok = match word.to_ascii_uppercase().as_str() {
                "NOT" => Token::Not,
                "AND" => Token::And,
                "OR" => Token::Or,
                _ => Token::Ident(word.to_string()),
            };
            out.push((tok, pos));
            continue;
        }
        return Err(syntax(pos, format!("unexpected character `{c}`")));
    }
    out.push((Token::End, text.len()));
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    schema: &'a FeatureSchema,
}

impl Parser<'_> {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos].0
    }

    fn position(&self) -> usize {
        self.tokens[self.pos].1
    }

    fn bump(&mut self) -> Token {
        let t = self.tokens[self.pos].0.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, what: &str) -> Error {
        let found = match self.peek() {
            Token::End => "end of input".to_string(),
            t => format!("{t:?}"),
        };
        Error::Syntax {
            position: self.position(),
            message: format!("expected {what}, found {found}"),
        }
    }

    fn logic(&mut self) -> Result<Expr> {
        let mut lhs = self.comparison()?;
        loop {
            let op = match self.peek() {
                Token::And => Op::And,
                Token::Or => Op::Or,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::binary(op, lhs, self.comparison()?);
        }
    }

    fn comparison(&mut self) -> Result<Expr> {
        let mut lhs = self.additive()?;
        loop {
            let op = match self.peek() {
                Token::Le => Op::Le,
                Token::Eq => Op::Eq,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::binary(op, lhs, self.additive()?);
        }
    }

    fn additive(&mut self) -> Result<Expr> {
        let mut lhs = self.multiplicative()?;
        loop {
            let op = match self.peek() {
                Token::Plus => Op::Add,
                Token::Minus => Op::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::binary(op, lhs, self.multiplicative()?);
        }
    }

    fn multiplicative(&mut self) -> Result<Expr> {
        let mut lhs = self.power()?;
        loop {
            let op = match self.peek() {
                Token::Star => Op::Mul,
                Token::Slash => Op::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            lhs = Expr::binary(op, lhs, self.power()?);
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let mut base = self.unary()?;
        while *self.peek() == Token::Caret {
            self.bump();
            match self.peek() {
                Token::Number(v) if *v == 2.0 => {
                    self.bump();
                    base = Expr::unary(Op::Square, base);
                }
                _ => return Err(self.error("exponent 2")),
            }
        }
        Ok(base)
    }

    fn unary(&mut self) -> Result<Expr> {
        if *self.peek() == Token::Not {
            self.bump();
            return Ok(Expr::unary(Op::Not, self.unary()?));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.peek().clone() {
            Token::Number(v) => {
                self.bump();
                Ok(Expr::Const(v))
            }
            Token::Minus => {
                self.bump();
                match self.peek() {
                    Token::Number(v) => {
                        let v = -*v;
                        self.bump();
                        Ok(Expr::Const(v))
                    }
                    _ => Err(self.error("a number after unary minus")),
                }
            }
            Token::Ident(name) => {
                let j = self
                    .schema
                    .index_of(&name)
                    .ok_or_else(|| Error::UnknownIdentifier(name.clone()))?;
                self.bump();
                Ok(Expr::Var(j))
            }
            Token::LParen => {
                self.bump();
                let inner = self.logic()?;
                if *self.peek() != Token::RParen {
                    return Err(self.error("`)`"));
                }
                self.bump();
                Ok(inner)
            }
            _ => Err(self.error("an operand")),
        }
    }
}

/// Parse infix text. Precedence, tightest first: NOT, `^2`, `* /`, `+ -`,
/// `<= =`, `AND OR`; binary operators associate to the left.
pub fn parse_expression(text: &str, schema: &FeatureSchema) -> Result<Expr> {
    let mut parser = Parser {
        tokens: tokenize(text)?,
        pos: 0,
        schema,
    };
    let expr = parser.logic()?;
    if *parser.peek() != Token::End {
        return Err(parser.error("end of input"));
    }
    Ok(expr)
}
