//! Constraint expressions: a small arithmetic AST over prediction outputs
//! `y[i]` and input features `x[j]`, with exact symbolic gradients and local
//! linearization of nonlinear constraints.
//!
//! Trees are immutable after construction and safe to evaluate from any
//! number of threads.

mod constraint;
mod parser;

pub use constraint::{Constraint, ConstraintError, ConstraintKind, Hardness, Provenance};
pub use parser::{parse_constraint, parse_constraint_file, ParseError};

use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Abs,
    Exp,
    Log,
    Sqrt,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Expression tree for the constraint DSL. `Pow` exponents are constants so
/// gradients stay closed-form.
#[derive(Debug, Clone, PartialEq)]
pub enum Expression {
    Constant(f64),
    /// Output variable `y[i]`.
    Output(usize),
    /// Input feature `x[j]`, treated as a constant under differentiation.
    Input(usize),
    Unary(UnaryOp, Box<Expression>),
    Binary(BinaryOp, Box<Expression>, Box<Expression>),
    Pow(Box<Expression>, f64),
    /// Σ wᵢ·eᵢ.
    WeightedSum(Vec<(f64, Expression)>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DomainViolation {
    LogNonPositive,
    SqrtNonPositive,
    DivisionByZero,
    /// Negative base with a non-integer exponent.
    PowNegativeBase,
    /// The operation produced a NaN or infinity (e.g. overflow).
    NonFinite,
    /// Variable index outside the declared dimensions.
    IndexOutOfRange,
}

impl fmt::Display for DomainViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DomainViolation::LogNonPositive => "log of a non-positive argument",
            DomainViolation::SqrtNonPositive => "sqrt of a non-positive argument",
            DomainViolation::DivisionByZero => "division by zero",
            DomainViolation::PowNegativeBase => "negative base with non-integer exponent",
            DomainViolation::NonFinite => "non-finite result",
            DomainViolation::IndexOutOfRange => "variable index out of range",
        };
        f.write_str(s)
    }
}

/// Evaluation error naming the offending subtree.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("domain violation in `{subtree}`: {violation}")]
pub struct EvalError {
    pub violation: DomainViolation,
    pub subtree: String,
}

impl Expression {
    fn err(&self, violation: DomainViolation) -> EvalError {
        EvalError {
            violation,
            subtree: self.to_string(),
        }
    }

    /// Exact recursive evaluation. Never returns NaN or infinity; every such
    /// case surfaces as a domain violation naming the subtree.
    pub fn evaluate(&self, y: &[f64], x: &[f64]) -> Result<f64, EvalError> {
        let v = match self {
            Expression::Constant(c) => *c,
            Expression::Output(i) => *y
                .get(*i)
                .ok_or_else(|| self.err(DomainViolation::IndexOutOfRange))?,
            Expression::Input(j) => *x
                .get(*j)
                .ok_or_else(|| self.err(DomainViolation::IndexOutOfRange))?,
            Expression::Unary(op, e) => {
                let a = e.evaluate(y, x)?;
                match op {
                    UnaryOp::Neg => -a,
                    UnaryOp::Abs => a.abs(),
                    UnaryOp::Exp => a.exp(),
                    UnaryOp::Log => {
                        if a <= 0.0 {
                            return Err(self.err(DomainViolation::LogNonPositive));
                        }
                        a.ln()
                    }
                    UnaryOp::Sqrt => {
                        if a <= 0.0 {
                            return Err(self.err(DomainViolation::SqrtNonPositive));
                        }
                        a.sqrt()
                    }
                    UnaryOp::Square => a * a,
                }
            }
            Expression::Binary(op, l, r) => {
                let a = l.evaluate(y, x)?;
                let b = r.evaluate(y, x)?;
                match op {
                    BinaryOp::Add => a + b,
                    BinaryOp::Sub => a - b,
                    BinaryOp::Mul => a * b,
                    BinaryOp::Div => {
                        if b == 0.0 {
                            return Err(self.err(DomainViolation::DivisionByZero));
                        }
                        a / b
                    }
                }
            }
            Expression::Pow(e, p) => {
                let a = e.evaluate(y, x)?;
                pow_const(a, *p).ok_or_else(|| self.err(DomainViolation::PowNegativeBase))?
            }
            Expression::WeightedSum(terms) => {
                let mut acc = 0.0;
                for (w, e) in terms {
                    acc += w * e.evaluate(y, x)?;
                }
                acc
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(self.err(DomainViolation::NonFinite))
        }
    }

    /// Exact symbolic gradient with respect to `y`; `x` is held constant.
    pub fn gradient(&self, y: &[f64], x: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.eval_grad(y, x, y.len())?.1)
    }

    /// Forward-mode value + gradient in one recursion.
    fn eval_grad(&self, y: &[f64], x: &[f64], d_y: usize) -> Result<(f64, Vec<f64>), EvalError> {
        let zero = || vec![0.0; d_y];
        let (v, g) = match self {
            Expression::Constant(c) => (*c, zero()),
            Expression::Output(i) => {
                let v = *y
                    .get(*i)
                    .ok_or_else(|| self.err(DomainViolation::IndexOutOfRange))?;
                let mut g = zero();
                g[*i] = 1.0;
                (v, g)
            }
            Expression::Input(j) => {
                let v = *x
                    .get(*j)
                    .ok_or_else(|| self.err(DomainViolation::IndexOutOfRange))?;
                (v, zero())
            }
            Expression::Unary(op, e) => {
                let (a, mut ga) = e.eval_grad(y, x, d_y)?;
                let (v, scale) = match op {
                    UnaryOp::Neg => (-a, -1.0),
                    // Subgradient 0 at the kink.
                    UnaryOp::Abs => (a.abs(), a.signum() * f64::from(a != 0.0)),
                    UnaryOp::Exp => (a.exp(), a.exp()),
                    UnaryOp::Log => {
                        if a <= 0.0 {
                            return Err(self.err(DomainViolation::LogNonPositive));
                        }
                        (a.ln(), 1.0 / a)
                    }
                    UnaryOp::Sqrt => {
                        if a <= 0.0 {
                            return Err(self.err(DomainViolation::SqrtNonPositive));
                        }
                        (a.sqrt(), 0.5 / a.sqrt())
                    }
                    UnaryOp::Square => (a * a, 2.0 * a),
                };
                for gi in &mut ga {
                    *gi *= scale;
                }
                (v, ga)
            }
            Expression::Binary(op, l, r) => {
                let (a, ga) = l.eval_grad(y, x, d_y)?;
                let (b, gb) = r.eval_grad(y, x, d_y)?;
                match op {
                    BinaryOp::Add => (a + b, combine(ga, 1.0, gb, 1.0)),
                    BinaryOp::Sub => (a - b, combine(ga, 1.0, gb, -1.0)),
                    BinaryOp::Mul => (a * b, combine(ga, b, gb, a)),
                    BinaryOp::Div => {
                        if b == 0.0 {
                            return Err(self.err(DomainViolation::DivisionByZero));
                        }
                        (a / b, combine(ga, 1.0 / b, gb, -a / (b * b)))
                    }
                }
            }
            Expression::Pow(e, p) => {
                let (a, mut ga) = e.eval_grad(y, x, d_y)?;
                let v =
                    pow_const(a, *p).ok_or_else(|| self.err(DomainViolation::PowNegativeBase))?;
                let dv = pow_const(a, *p - 1.0)
                    .map(|w| p * w)
                    .ok_or_else(|| self.err(DomainViolation::PowNegativeBase))?;
                for gi in &mut ga {
                    *gi *= dv;
                }
                (v, ga)
            }
            Expression::WeightedSum(terms) => {
                let mut acc = 0.0;
                let mut g = zero();
                for (w, e) in terms {
                    let (v, gv) = e.eval_grad(y, x, d_y)?;
                    acc += w * v;
                    for (gi, gj) in g.iter_mut().zip(&gv) {
                        *gi += w * gj;
                    }
                }
                (acc, g)
            }
        };
        if !v.is_finite() || g.iter().any(|gi| !gi.is_finite()) {
            return Err(self.err(DomainViolation::NonFinite));
        }
        Ok((v, g))
    }

    /// Largest output index referenced, if any.
    pub fn max_output_index(&self) -> Option<usize> {
        self.fold_indices(&mut |idx, is_output| if is_output { Some(idx) } else { None })
    }

    /// Largest input index referenced, if any.
    pub fn max_input_index(&self) -> Option<usize> {
        self.fold_indices(&mut |idx, is_output| if is_output { None } else { Some(idx) })
    }

    fn fold_indices(&self, pick: &mut dyn FnMut(usize, bool) -> Option<usize>) -> Option<usize> {
        let m = |a: Option<usize>, b: Option<usize>| match (a, b) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (a, b) => a.or(b),
        };
        match self {
            Expression::Constant(_) => None,
            Expression::Output(i) => pick(*i, true),
            Expression::Input(j) => pick(*j, false),
            Expression::Unary(_, e) | Expression::Pow(e, _) => e.fold_indices(pick),
            Expression::Binary(_, l, r) => m(l.fold_indices(pick), r.fold_indices(pick)),
            Expression::WeightedSum(terms) => terms
                .iter()
                .fold(None, |acc, (_, e)| m(acc, e.fold_indices(pick))),
        }
    }
}

fn combine(mut ga: Vec<f64>, ca: f64, gb: Vec<f64>, cb: f64) -> Vec<f64> {
    for (a, b) in ga.iter_mut().zip(&gb) {
        *a = *a * ca + cb * b;
    }
    ga
}

/// `base^p` for a constant exponent, using integer powers where exact.
/// Returns None when the result would require a complex branch.
fn pow_const(base: f64, p: f64) -> Option<f64> {
    if p.fract() == 0.0 && p.abs() <= i32::MAX as f64 {
        Some(base.powi(p as i32))
    } else if base < 0.0 {
        None
    } else {
        Some(base.powf(p))
    }
}

/// First-order model g(ŷ,x) + ∇g(ŷ,x)ᵀ(y − ŷ) ≤ 0 of a nonlinear constraint
/// around an anchor prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedConstraint {
    pub gradient: Vec<f64>,
    pub offset: f64,
    pub anchor: Vec<f64>,
    pub source_id: String,
}

impl LinearizedConstraint {
    /// Evaluate the linear model at `y`.
    pub fn value_at(&self, y: &[f64]) -> f64 {
        let mut v = self.offset;
        for ((gi, yi), ai) in self.gradient.iter().zip(y).zip(&self.anchor) {
            v += gi * (yi - ai);
        }
        v
    }

    /// As a halfspace row aᵀy ≤ b: a = ∇g, b = ∇gᵀŷ − g(ŷ).
    pub fn as_halfspace(&self) -> (Vec<f64>, f64) {
        let dot: f64 = self
            .gradient
            .iter()
            .zip(&self.anchor)
            .map(|(g, a)| g * a)
            .sum();
        (self.gradient.clone(), dot - self.offset)
    }
}

/// Linearize `g(y, x) ≤ 0` around `anchor`.
pub fn linearize(
    g: &Expression,
    source_id: &str,
    anchor: &[f64],
    x: &[f64],
) -> Result<LinearizedConstraint, EvalError> {
    let (offset, gradient) = g.eval_grad(anchor, x, anchor.len())?;
    Ok(LinearizedConstraint {
        gradient,
        offset,
        anchor: anchor.to_vec(),
        source_id: source_id.to_string(),
    })
}

// Pretty printer. Output re-parses to a structurally equal tree, which pins
// the parenthesization rules below.
impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

impl Expression {
    // Precedence levels: 0 add/sub, 1 mul/div, 2 unary/pow, 3 atoms.
    fn prec(&self) -> u8 {
        match self {
            Expression::Binary(BinaryOp::Add | BinaryOp::Sub, ..) | Expression::WeightedSum(_) => {
                0
            }
            Expression::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 1,
            Expression::Unary(UnaryOp::Neg, _) | Expression::Pow(..) => 2,
            Expression::Constant(c) if *c < 0.0 => 2,
            _ => 3,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        let needs_parens = self.prec() < min_prec;
        if needs_parens {
            f.write_str("(")?;
        }
        match self {
            Expression::Constant(c) => write!(f, "{}", c)?,
            Expression::Output(i) => write!(f, "y[{}]", i)?,
            Expression::Input(j) => write!(f, "x[{}]", j)?,
            Expression::Unary(UnaryOp::Neg, e) => {
                f.write_str("-")?;
                e.fmt_prec(f, 3)?;
            }
            Expression::Unary(UnaryOp::Square, e) => {
                e.fmt_prec(f, 3)?;
                f.write_str("^2")?;
            }
            Expression::Unary(op, e) => {
                let name = match op {
                    UnaryOp::Abs => "abs",
                    UnaryOp::Exp => "exp",
                    UnaryOp::Log => "log",
                    UnaryOp::Sqrt => "sqrt",
                    _ => unreachable!(),
                };
                write!(f, "{}(", name)?;
                e.fmt_prec(f, 0)?;
                f.write_str(")")?;
            }
            Expression::Binary(op, l, r) => {
                let (sym, lp, rp) = match op {
                    BinaryOp::Add => (" + ", 0, 1),
                    BinaryOp::Sub => (" - ", 0, 1),
                    BinaryOp::Mul => (" * ", 1, 2),
                    BinaryOp::Div => (" / ", 1, 2),
                };
                l.fmt_prec(f, lp)?;
                f.write_str(sym)?;
                r.fmt_prec(f, rp)?;
            }
            Expression::Pow(e, p) => {
                e.fmt_prec(f, 3)?;
                if *p < 0.0 {
                    write!(f, "^({})", p)?;
                } else {
                    write!(f, "^{}", p)?;
                }
            }
            Expression::WeightedSum(terms) => {
                if terms.is_empty() {
                    f.write_str("0")?;
                }
                for (k, (w, e)) in terms.iter().enumerate() {
                    if k > 0 {
                        f.write_str(" + ")?;
                    }
                    write!(f, "{} * ", w)?;
                    e.fmt_prec(f, 2)?;
                }
            }
        }
        if needs_parens {
            f.write_str(")")?;
        }
        Ok(())
    }
}
