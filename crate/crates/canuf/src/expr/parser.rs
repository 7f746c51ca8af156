//! Recursive-descent parser for the constraint DSL.
//!
//! One statement per line, `#` starts a comment:
//!
//! ```text
//! stmt     := hardness ":" body
//! hardness := "hard" | "soft" "(" weight ")"
//! body     := bound | conserve | lininq | lineq | nonlin
//! bound    := "y[" idx "]" ( "<=" real | ">=" real | "in" "[" real "," real "]" )
//! conserve := "sum(" term ("+" term)* ")" "==" real "tol" real
//! lininq   := term ("+" term)* "<=" real
//! lineq    := term ("+" term)* "==" real
//! nonlin   := "g:" expr "<=" "0"
//! term     := real "*" ("y[" idx "]" | "x[" idx "]")
//! ```
//!
//! `expr` is ordinary arithmetic over `y[i]`, `x[j]` and reals with `neg`,
//! `abs`, `exp`, `log`, `sqrt` and `^const`. An exponent of exactly 2
//! normalizes to the dedicated square node. A linear-term statement that
//! mentions `x[j]` is represented as a nonlinear inequality, since linear
//! rows range over outputs only; its linearization is exact.

use thiserror::Error;

use super::constraint::{Constraint, ConstraintError, ConstraintKind, Hardness, Provenance};
use super::{BinaryOp, Expression, UnaryOp};

#[derive(Debug, Clone, Error, PartialEq)]
#[error("parse error at line {line}, column {column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Number(f64),
    Ident(String),
    LBracket,
    RBracket,
    LParen,
    RParen,
    Comma,
    Colon,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    Le,
    Ge,
    EqEq,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    column: usize,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, line: usize) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
            line,
        }
    }

    fn error(&self, column: usize, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn tokens(mut self) -> Result<Vec<Spanned>, ParseError> {
        let mut out = Vec::new();
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let column = self.pos + 1;
            match c {
                b' ' | b'\t' | b'\r' => {
                    self.pos += 1;
                    continue;
                }
                b'#' => break,
                b'[' => out.push(self.one(Tok::LBracket)),
                b']' => out.push(self.one(Tok::RBracket)),
                b'(' => out.push(self.one(Tok::LParen)),
                b')' => out.push(self.one(Tok::RParen)),
                b',' => out.push(self.one(Tok::Comma)),
                b':' => out.push(self.one(Tok::Colon)),
                b'+' => out.push(self.one(Tok::Plus)),
                b'-' => out.push(self.one(Tok::Minus)),
                b'*' => out.push(self.one(Tok::Star)),
                b'/' => out.push(self.one(Tok::Slash)),
                b'^' => out.push(self.one(Tok::Caret)),
                b'<' | b'>' | b'=' => {
                    if self.pos + 1 >= self.src.len() || self.src[self.pos + 1] != b'=' {
                        return Err(self.error(column, format!("expected `{}=`", c as char)));
                    }
                    let tok = match c {
                        b'<' => Tok::Le,
                        b'>' => Tok::Ge,
                        _ => Tok::EqEq,
                    };
                    self.pos += 2;
                    out.push(Spanned { tok, column });
                }
                b'0'..=b'9' | b'.' => {
                    let start = self.pos;
                    while self.pos < self.src.len()
                        && matches!(self.src[self.pos], b'0'..=b'9' | b'.')
                    {
                        self.pos += 1;
                    }
                    if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
                        let mut probe = self.pos + 1;
                        if probe < self.src.len() && matches!(self.src[probe], b'+' | b'-') {
                            probe += 1;
                        }
                        if probe < self.src.len() && self.src[probe].is_ascii_digit() {
                            self.pos = probe;
                            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit()
                            {
                                self.pos += 1;
                            }
                        }
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    let value: f64 = text
                        .parse()
                        .map_err(|_| self.error(column, format!("invalid number `{text}`")))?;
                    out.push(Spanned {
                        tok: Tok::Number(value),
                        column,
                    });
                }
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                    let start = self.pos;
                    while self.pos < self.src.len()
                        && matches!(self.src[self.pos], b'a'..=b'z' | b'A'..=b'Z' | b'0'..=b'9' | b'_')
                    {
                        self.pos += 1;
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    out.push(Spanned {
                        tok: Tok::Ident(text.to_string()),
                        column,
                    });
                }
                _ => return Err(self.error(column, format!("unexpected character `{}`", c as char))),
            }
        }
        Ok(out)
    }

    fn one(&mut self, tok: Tok) -> Spanned {
        let column = self.pos + 1;
        self.pos += 1;
        Spanned { tok, column }
    }
}

struct Parser {
    toks: Vec<Spanned>,
    idx: usize,
    line: usize,
    d_y: usize,
    d_x: usize,
}

impl Parser {
    fn error(&self, message: impl Into<String>) -> ParseError {
        let column = self
            .toks
            .get(self.idx)
            .map(|s| s.column)
            .unwrap_or_else(|| self.toks.last().map(|s| s.column + 1).unwrap_or(1));
        ParseError {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|s| &s.tok)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.idx).map(|s| s.tok.clone());
        if t.is_some() {
            self.idx += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if *t == tok => {
                self.idx += 1;
                Ok(())
            }
            _ => Err(self.error(format!("expected {what}"))),
        }
    }

    fn expect_ident(&mut self, name: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == name => {
                self.idx += 1;
                Ok(())
            }
            _ => Err(self.error(format!("expected `{name}`"))),
        }
    }

    /// Signed real.
    fn real(&mut self) -> Result<f64, ParseError> {
        let neg = matches!(self.peek(), Some(Tok::Minus));
        if neg {
            self.idx += 1;
        }
        match self.next() {
            Some(Tok::Number(v)) => Ok(if neg { -v } else { v }),
            _ => {
                self.idx = self.idx.saturating_sub(1);
                Err(self.error("expected a number"))
            }
        }
    }

    fn index(&mut self) -> Result<usize, ParseError> {
        match self.next() {
            Some(Tok::Number(v)) if v.fract() == 0.0 && v >= 0.0 => Ok(v as usize),
            _ => {
                self.idx = self.idx.saturating_sub(1);
                Err(self.error("expected a nonnegative integer index"))
            }
        }
    }

    fn output_index(&mut self) -> Result<usize, ParseError> {
        let i = self.index()?;
        if i >= self.d_y {
            return Err(self.error(format!(
                "output index {i} out of range for output dimension {}",
                self.d_y
            )));
        }
        Ok(i)
    }

    fn input_index(&mut self) -> Result<usize, ParseError> {
        let j = self.index()?;
        if j >= self.d_x {
            return Err(self.error(format!(
                "input index {j} out of range for feature dimension {}",
                self.d_x
            )));
        }
        Ok(j)
    }

    fn at_end(&self) -> bool {
        self.idx == self.toks.len()
    }

    fn hardness(&mut self) -> Result<Hardness, ParseError> {
        match self.next() {
            Some(Tok::Ident(s)) if s == "hard" => Ok(Hardness::Hard),
            Some(Tok::Ident(s)) if s == "soft" => {
                self.expect(Tok::LParen, "`(` after `soft`")?;
                let weight = self.real()?;
                if !(weight >= 0.0 && weight.is_finite()) {
                    return Err(self.error(format!("soft weight must be nonnegative, got {weight}")));
                }
                self.expect(Tok::RParen, "`)` closing soft weight")?;
                Ok(Hardness::Soft { weight })
            }
            _ => {
                self.idx = self.idx.saturating_sub(1);
                Err(self.error("expected `hard` or `soft(w)`"))
            }
        }
    }

    /// One `coeff * var` term; returns (coefficient, output index or input index).
    fn term(&mut self) -> Result<(f64, VarRef), ParseError> {
        let coeff = self.real()?;
        self.expect(Tok::Star, "`*` in linear term")?;
        let var = match self.next() {
            Some(Tok::Ident(s)) if s == "y" => {
                self.expect(Tok::LBracket, "`[`")?;
                let i = self.output_index()?;
                self.expect(Tok::RBracket, "`]`")?;
                VarRef::Output(i)
            }
            Some(Tok::Ident(s)) if s == "x" => {
                self.expect(Tok::LBracket, "`[`")?;
                let j = self.input_index()?;
                self.expect(Tok::RBracket, "`]`")?;
                VarRef::Input(j)
            }
            _ => {
                self.idx = self.idx.saturating_sub(1);
                return Err(self.error("expected `y[i]` or `x[j]`"));
            }
        };
        Ok((coeff, var))
    }

    fn terms(&mut self) -> Result<Vec<(f64, VarRef)>, ParseError> {
        let mut out = vec![self.term()?];
        while matches!(self.peek(), Some(Tok::Plus)) {
            self.idx += 1;
            out.push(self.term()?);
        }
        Ok(out)
    }

    fn body(&mut self) -> Result<ConstraintKind, ParseError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s == "y" => self.bound(),
            Some(Tok::Ident(s)) if s == "sum" => self.conserve(),
            Some(Tok::Ident(s)) if s == "g" => self.nonlin(),
            Some(Tok::Number(_)) | Some(Tok::Minus) => self.linear(),
            _ => Err(self.error("expected a constraint body")),
        }
    }

    fn bound(&mut self) -> Result<ConstraintKind, ParseError> {
        self.expect_ident("y")?;
        self.expect(Tok::LBracket, "`[`")?;
        let index = self.output_index()?;
        self.expect(Tok::RBracket, "`]`")?;
        match self.next() {
            Some(Tok::Le) => Ok(ConstraintKind::Bounds {
                index,
                lower: None,
                upper: Some(self.real()?),
            }),
            Some(Tok::Ge) => Ok(ConstraintKind::Bounds {
                index,
                lower: Some(self.real()?),
                upper: None,
            }),
            Some(Tok::Ident(s)) if s == "in" => {
                self.expect(Tok::LBracket, "`[`")?;
                let lower = self.real()?;
                self.expect(Tok::Comma, "`,`")?;
                let upper = self.real()?;
                self.expect(Tok::RBracket, "`]`")?;
                if lower > upper {
                    return Err(self.error(format!("bounds lower {lower} > upper {upper}")));
                }
                Ok(ConstraintKind::Bounds {
                    index,
                    lower: Some(lower),
                    upper: Some(upper),
                })
            }
            _ => {
                self.idx = self.idx.saturating_sub(1);
                Err(self.error("expected `<=`, `>=` or `in [l, u]`"))
            }
        }
    }

    fn conserve(&mut self) -> Result<ConstraintKind, ParseError> {
        self.expect_ident("sum")?;
        self.expect(Tok::LParen, "`(`")?;
        let terms = self.terms()?;
        self.expect(Tok::RParen, "`)`")?;
        self.expect(Tok::EqEq, "`==`")?;
        let value = self.real()?;
        self.expect_ident("tol")?;
        let tolerance = self.real()?;
        if tolerance <= 0.0 {
            return Err(self.error(format!("conservation tolerance must be positive, got {tolerance}")));
        }
        let mut coefficients = vec![0.0; self.d_y];
        for (c, var) in terms {
            match var {
                VarRef::Output(i) => coefficients[i] += c,
                VarRef::Input(_) => {
                    return Err(self.error("conservation terms must reference outputs y[i]"))
                }
            }
        }
        Ok(ConstraintKind::Conservation {
            coefficients,
            value,
            tolerance,
        })
    }

    fn linear(&mut self) -> Result<ConstraintKind, ParseError> {
        let terms = self.terms()?;
        let (is_eq, rhs) = match self.next() {
            Some(Tok::Le) => (false, self.real()?),
            Some(Tok::EqEq) => (true, self.real()?),
            _ => {
                self.idx = self.idx.saturating_sub(1);
                return Err(self.error("expected `<=` or `==`"));
            }
        };
        let mentions_input = terms.iter().any(|(_, v)| matches!(v, VarRef::Input(_)));
        if mentions_input {
            if is_eq {
                return Err(self.error("equality rows must reference outputs y[i] only"));
            }
            // Linear in y but input-dependent: keep as a nonlinear inequality
            // whose linearization is exact.
            let mut sum: Vec<(f64, Expression)> = terms
                .into_iter()
                .map(|(c, v)| {
                    let e = match v {
                        VarRef::Output(i) => Expression::Output(i),
                        VarRef::Input(j) => Expression::Input(j),
                    };
                    (c, e)
                })
                .collect();
            sum.push((-1.0, Expression::Constant(rhs)));
            return Ok(ConstraintKind::NonlinearInequality {
                g: Expression::WeightedSum(sum),
            });
        }
        let mut row = vec![0.0; self.d_y];
        for (c, var) in terms {
            if let VarRef::Output(i) = var {
                row[i] += c;
            }
        }
        if is_eq {
            Ok(ConstraintKind::LinearEquality { row, value: rhs })
        } else {
            Ok(ConstraintKind::LinearInequality { row, bound: rhs })
        }
    }

    fn nonlin(&mut self) -> Result<ConstraintKind, ParseError> {
        self.expect_ident("g")?;
        self.expect(Tok::Colon, "`:` after `g`")?;
        let g = self.expr()?;
        self.expect(Tok::Le, "`<= 0` closing nonlinear constraint")?;
        match self.next() {
            Some(Tok::Number(v)) if v == 0.0 => {}
            _ => {
                self.idx = self.idx.saturating_sub(1);
                return Err(self.error("nonlinear constraints must end with `<= 0`"));
            }
        }
        Ok(ConstraintKind::NonlinearInequality { g })
    }

    // expr := mul (("+"|"-") mul)*
    fn expr(&mut self) -> Result<Expression, ParseError> {
        let mut left = self.mul()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Plus) => BinaryOp::Add,
                Some(Tok::Minus) => BinaryOp::Sub,
                _ => break,
            };
            self.idx += 1;
            let right = self.mul()?;
            left = Expression::Binary(op, Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn mul(&mut self) -> Result<Expression, ParseError> {
        let mut left = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(Tok::Star) => BinaryOp::Mul,
                Some(Tok::Slash) => BinaryOp::Div,
                _ => break,
            };
            self.idx += 1;
            let right = self.unary()?;
            left = Expression::Binary(op, Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn unary(&mut self) -> Result<Expression, ParseError> {
        if matches!(self.peek(), Some(Tok::Minus)) {
            self.idx += 1;
            // `-2` lexes into a negative constant, anything else into neg.
            let inner = self.unary()?;
            return Ok(match inner {
                Expression::Constant(c) => Expression::Constant(-c),
                e => Expression::Unary(UnaryOp::Neg, Box::new(e)),
            });
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expression, ParseError> {
        let base = self.primary()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.idx += 1;
            let exponent = if matches!(self.peek(), Some(Tok::LParen)) {
                self.idx += 1;
                let v = self.real()?;
                self.expect(Tok::RParen, "`)` closing exponent")?;
                v
            } else {
                self.real()?
            };
            if exponent == 2.0 {
                return Ok(Expression::Unary(UnaryOp::Square, Box::new(base)));
            }
            return Ok(Expression::Pow(Box::new(base), exponent));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expression, ParseError> {
        match self.next() {
            Some(Tok::Number(v)) => Ok(Expression::Constant(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(s)) => match s.as_str() {
                "y" => {
                    self.expect(Tok::LBracket, "`[`")?;
                    let i = self.output_index()?;
                    self.expect(Tok::RBracket, "`]`")?;
                    Ok(Expression::Output(i))
                }
                "x" => {
                    self.expect(Tok::LBracket, "`[`")?;
                    let j = self.input_index()?;
                    self.expect(Tok::RBracket, "`]`")?;
                    Ok(Expression::Input(j))
                }
                "abs" | "exp" | "log" | "sqrt" | "square" => {
                    let op = match s.as_str() {
                        "abs" => UnaryOp::Abs,
                        "exp" => UnaryOp::Exp,
                        "log" => UnaryOp::Log,
                        "sqrt" => UnaryOp::Sqrt,
                        _ => UnaryOp::Square,
                    };
                    self.expect(Tok::LParen, "`(`")?;
                    let e = self.expr()?;
                    self.expect(Tok::RParen, "`)`")?;
                    Ok(Expression::Unary(op, Box::new(e)))
                }
                other => {
                    self.idx = self.idx.saturating_sub(1);
                    Err(self.error(format!("unknown identifier `{other}`")))
                }
            },
            _ => {
                self.idx = self.idx.saturating_sub(1);
                Err(self.error("expected an expression"))
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum VarRef {
    Output(usize),
    Input(usize),
}

fn parse_line(
    source: &str,
    line: usize,
    id: String,
    d_y: usize,
    d_x: usize,
) -> Result<Constraint, ParseError> {
    let toks = Lexer::new(source, line).tokens()?;
    let mut p = Parser {
        toks,
        idx: 0,
        line,
        d_y,
        d_x,
    };
    let hardness = p.hardness()?;
    p.expect(Tok::Colon, "`:` after hardness")?;
    let kind = p.body()?;
    if !p.at_end() {
        return Err(p.error("unexpected trailing tokens"));
    }
    let constraint = Constraint {
        id,
        kind,
        hardness,
        score: None,
        provenance: Provenance::Manual,
    };
    constraint.check().map_err(|e: ConstraintError| ParseError {
        line,
        column: 1,
        message: e.to_string(),
    })?;
    Ok(constraint)
}

/// Parse a single DSL statement.
pub fn parse_constraint(source: &str, d_y: usize, d_x: usize) -> Result<Constraint, ParseError> {
    parse_line(source, 1, "c1".to_string(), d_y, d_x)
}

/// Parse a whole constraint file: one statement per line, blank lines and
/// `#` comments ignored. Constraint ids are `c<line>`.
pub fn parse_constraint_file(
    text: &str,
    d_y: usize,
    d_x: usize,
) -> Result<Vec<Constraint>, ParseError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = raw.trim();
        if stripped.is_empty() || stripped.starts_with('#') {
            continue;
        }
        out.push(parse_line(raw, line, format!("c{line}"), d_y, d_x)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_upper_bound() {
        let c = parse_constraint("hard: y[0] <= 1.0", 1, 0).unwrap();
        assert_eq!(c.hardness, Hardness::Hard);
        assert_eq!(
            c.kind,
            ConstraintKind::Bounds {
                index: 0,
                lower: None,
                upper: Some(1.0)
            }
        );
    }

    #[test]
    fn parses_conservation() {
        let c = parse_constraint("hard: sum(1.0*y[0] + 1.0*y[1]) == 2.0 tol 1e-9", 2, 0).unwrap();
        assert_eq!(
            c.kind,
            ConstraintKind::Conservation {
                coefficients: vec![1.0, 1.0],
                value: 2.0,
                tolerance: 1e-9
            }
        );
    }

    #[test]
    fn parses_soft_nonlinear_square() {
        let c = parse_constraint("soft(0.5): g: y[0]^2 - 1.0 <= 0", 1, 0).unwrap();
        assert_eq!(c.hardness, Hardness::Soft { weight: 0.5 });
        let expected = Expression::Binary(
            BinaryOp::Sub,
            Box::new(Expression::Unary(
                UnaryOp::Square,
                Box::new(Expression::Output(0)),
            )),
            Box::new(Expression::Constant(1.0)),
        );
        assert_eq!(c.kind, ConstraintKind::NonlinearInequality { g: expected });
    }

    #[test]
    fn rejects_out_of_range_index() {
        let err = parse_constraint("hard: y[3] <= 1.0", 2, 0).unwrap_err();
        assert!(err.message.contains("out of range"));
        assert_eq!(err.line, 1);
    }

    #[test]
    fn rejects_inverted_bounds() {
        let err = parse_constraint("hard: y[0] in [2.0, 1.0]", 1, 0).unwrap_err();
        assert!(err.message.contains("lower"));
    }

    #[test]
    fn reports_line_and_column() {
        let err = parse_constraint("hard: y[0] <= banana", 1, 0).unwrap_err();
        assert_eq!(err.line, 1);
        assert!(err.column > 10, "column was {}", err.column);
    }

    #[test]
    fn file_parsing_skips_comments_and_blanks() {
        let text = "# header\n\nhard: y[0] <= 1.0\nsoft(2.0): 1.0*y[0] + 2.0*y[1] <= 3.0\n";
        let cs = parse_constraint_file(text, 2, 0).unwrap();
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].id, "c3");
        assert_eq!(cs[1].id, "c4");
        assert_eq!(
            cs[1].kind,
            ConstraintKind::LinearInequality {
                row: vec![1.0, 2.0],
                bound: 3.0
            }
        );
    }

    #[test]
    fn linear_with_input_becomes_nonlinear() {
        let c = parse_constraint("hard: 1.0*y[0] + -2.0*x[0] <= 0.5", 1, 1).unwrap();
        match &c.kind {
            ConstraintKind::NonlinearInequality { g } => {
                assert_eq!(g.evaluate(&[1.0], &[0.25]).unwrap(), 0.0);
            }
            other => panic!("expected nonlinear fallback, got {other:?}"),
        }
    }

    #[test]
    fn linear_equality_statement() {
        let c = parse_constraint("hard: 1.0*y[0] + -1.0*y[1] == 0.0", 2, 0).unwrap();
        assert_eq!(
            c.kind,
            ConstraintKind::LinearEquality {
                row: vec![1.0, -1.0],
                value: 0.0
            }
        );
    }

    #[test]
    fn roundtrip_examples() {
        let sources = [
            "hard: y[0] <= 1.0",
            "hard: y[1] >= -0.25",
            "soft(0.5): y[0] in [0, 1]",
            "hard: sum(1.0*y[0] + 1.0*y[1]) == 2.0 tol 1e-9",
            "soft(3.0): 2.0*y[0] + -1.0*y[1] <= 4.0",
            "hard: 1.0*y[0] + -1.0*y[1] == 0.0",
            "soft(0.5): g: y[0]^2 - 1.0 <= 0",
            "hard: g: exp(y[0]) - 2.0 <= 0",
            "hard: g: sqrt(y[0] + 5.0) * x[0] - 1.0 <= 0",
            "hard: g: abs(y[0]) + log(y[1] + 3.0) / 2.0 - y[0]^0.5 <= 0",
            "hard: g: -y[0] + (y[1] - 1.0)^3 <= 0",
        ];
        for src in sources {
            let c = parse_constraint(src, 2, 1).unwrap();
            let printed = c.to_string();
            let reparsed = parse_constraint(&printed, 2, 1)
                .unwrap_or_else(|e| panic!("`{printed}` failed to re-parse: {e}"));
            assert!(
                c.structurally_eq(&reparsed, 0.0),
                "round trip changed `{src}` -> `{printed}`"
            );
        }
    }
}
