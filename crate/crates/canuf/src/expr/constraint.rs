//! Parsed, evaluable scientific rules over model outputs.

use std::fmt;

use thiserror::Error;

use super::{EvalError, Expression};

#[derive(Debug, Clone, PartialEq)]
pub enum Hardness {
    Hard,
    /// Soft constraints enter the training objective through a weighted
    /// penalty, never the projection set.
    Soft { weight: f64 },
}

impl Hardness {
    pub fn is_hard(&self) -> bool {
        matches!(self, Hardness::Hard)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Manual,
    Extracted { template_id: String, match_id: String },
}

/// Constraint body. Linear rows are dense over the declared output dimension.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintKind {
    /// aᵀy ≤ b.
    LinearInequality { row: Vec<f64>, bound: f64 },
    /// aᵀy = b.
    LinearEquality { row: Vec<f64>, value: f64 },
    /// Box limits on one output component; either side may be absent.
    Bounds {
        index: usize,
        lower: Option<f64>,
        upper: Option<f64>,
    },
    /// Σ αᵢ·y[i] = value, satisfied within `tolerance`.
    Conservation {
        coefficients: Vec<f64>,
        value: f64,
        tolerance: f64,
    },
    /// g(y, x) ≤ 0.
    NonlinearInequality { g: Expression },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub id: String,
    pub kind: ConstraintKind,
    pub hardness: Hardness,
    /// Verification score s(c) ∈ [0,1]; absent until verified.
    pub score: Option<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConstraintError {
    #[error("bounds constraint has lower {lower} > upper {upper}")]
    EmptyBounds { lower: f64, upper: f64 },
    #[error("bounds constraint has neither a lower nor an upper limit")]
    VacuousBounds,
    #[error("conservation tolerance must be positive, got {0}")]
    NonPositiveTolerance(f64),
    #[error("soft weight must be nonnegative and finite, got {0}")]
    BadSoftWeight(f64),
    #[error("non-finite coefficient in constraint")]
    NonFiniteCoefficient,
    #[error("output index {index} exceeds output dimension {d_y}")]
    OutputIndexOutOfRange { index: usize, d_y: usize },
    #[error("input index {index} exceeds feature dimension {d_x}")]
    InputIndexOutOfRange { index: usize, d_x: usize },
}

impl Constraint {
    pub fn new(
        id: impl Into<String>,
        kind: ConstraintKind,
        hardness: Hardness,
    ) -> Result<Self, ConstraintError> {
        let c = Constraint {
            id: id.into(),
            kind,
            hardness,
            score: None,
            provenance: Provenance::Manual,
        };
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<(), ConstraintError> {
        if let Hardness::Soft { weight } = self.hardness {
            if !(weight >= 0.0 && weight.is_finite()) {
                return Err(ConstraintError::BadSoftWeight(weight));
            }
        }
        match &self.kind {
            ConstraintKind::Bounds { lower, upper, .. } => match (lower, upper) {
                (None, None) => Err(ConstraintError::VacuousBounds),
                (Some(l), Some(u)) if l > u => Err(ConstraintError::EmptyBounds {
                    lower: *l,
                    upper: *u,
                }),
                _ => Ok(()),
            },
            ConstraintKind::Conservation { tolerance, .. } => {
                if *tolerance > 0.0 {
                    Ok(())
                } else {
                    Err(ConstraintError::NonPositiveTolerance(*tolerance))
                }
            }
            _ => Ok(()),
        }?;
        let finite = match &self.kind {
            ConstraintKind::LinearInequality { row, bound } => {
                row.iter().all(|v| v.is_finite()) && bound.is_finite()
            }
            ConstraintKind::LinearEquality { row, value } => {
                row.iter().all(|v| v.is_finite()) && value.is_finite()
            }
            ConstraintKind::Conservation {
                coefficients,
                value,
                tolerance,
            } => {
                coefficients.iter().all(|v| v.is_finite())
                    && value.is_finite()
                    && tolerance.is_finite()
            }
            ConstraintKind::Bounds { lower, upper, .. } => {
                lower.map_or(true, f64::is_finite) && upper.map_or(true, f64::is_finite)
            }
            ConstraintKind::NonlinearInequality { .. } => true,
        };
        if finite {
            Ok(())
        } else {
            Err(ConstraintError::NonFiniteCoefficient)
        }
    }

    /// Validate variable indices against declared dimensions.
    pub fn check_dims(&self, d_y: usize, d_x: usize) -> Result<(), ConstraintError> {
        let bad_y = |index| ConstraintError::OutputIndexOutOfRange { index, d_y };
        match &self.kind {
            ConstraintKind::LinearInequality { row, .. }
            | ConstraintKind::LinearEquality { row, .. } => {
                if row.len() > d_y {
                    return Err(bad_y(row.len() - 1));
                }
            }
            ConstraintKind::Conservation { coefficients, .. } => {
                if coefficients.len() > d_y {
                    return Err(bad_y(coefficients.len() - 1));
                }
            }
            ConstraintKind::Bounds { index, .. } => {
                if *index >= d_y {
                    return Err(bad_y(*index));
                }
            }
            ConstraintKind::NonlinearInequality { g } => {
                if let Some(i) = g.max_output_index() {
                    if i >= d_y {
                        return Err(bad_y(i));
                    }
                }
                if let Some(j) = g.max_input_index() {
                    if j >= d_x {
                        return Err(ConstraintError::InputIndexOutOfRange { index: j, d_x });
                    }
                }
            }
        }
        Ok(())
    }

    /// Indicator cₖ(y, x) of §-style satisfaction. Inequalities allow `slack`;
    /// conservation additionally honors its own tolerance.
    pub fn is_satisfied(&self, y: &[f64], x: &[f64], slack: f64) -> Result<bool, EvalError> {
        Ok(match &self.kind {
            ConstraintKind::LinearInequality { row, bound } => {
                dot(row, y) <= *bound + slack
            }
            ConstraintKind::LinearEquality { row, value } => {
                (dot(row, y) - value).abs() <= slack
            }
            ConstraintKind::Bounds { index, lower, upper } => {
                let v = y[*index];
                lower.map_or(true, |l| v >= l - slack) && upper.map_or(true, |u| v <= u + slack)
            }
            ConstraintKind::Conservation {
                coefficients,
                value,
                tolerance,
            } => (dot(coefficients, y) - value).abs() <= tolerance.max(slack),
            ConstraintKind::NonlinearInequality { g } => g.evaluate(y, x)? <= slack,
        })
    }

    /// Positive part of the violation magnitude (0 when satisfied).
    pub fn violation(&self, y: &[f64], x: &[f64]) -> Result<f64, EvalError> {
        Ok(match &self.kind {
            ConstraintKind::LinearInequality { row, bound } => (dot(row, y) - bound).max(0.0),
            ConstraintKind::LinearEquality { row, value } => (dot(row, y) - value).abs(),
            ConstraintKind::Bounds { index, lower, upper } => {
                let v = y[*index];
                let below = lower.map_or(0.0, |l| (l - v).max(0.0));
                let above = upper.map_or(0.0, |u| (v - u).max(0.0));
                below.max(above)
            }
            ConstraintKind::Conservation {
                coefficients,
                value,
                tolerance,
            } => {
                let r = (dot(coefficients, y) - value).abs();
                if r <= *tolerance {
                    0.0
                } else {
                    r
                }
            }
            ConstraintKind::NonlinearInequality { g } => g.evaluate(y, x)?.max(0.0),
        })
    }

    /// Structural equality on kind and hardness, ignoring metadata, with a
    /// per-parameter absolute tolerance.
    pub fn structurally_eq(&self, other: &Constraint, tol: f64) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= tol;
        let rows_close = |a: &[f64], b: &[f64]| {
            let n = a.len().max(b.len());
            (0..n).all(|i| close(*a.get(i).unwrap_or(&0.0), *b.get(i).unwrap_or(&0.0)))
        };
        let kinds = match (&self.kind, &other.kind) {
            (
                ConstraintKind::LinearInequality { row: r1, bound: b1 },
                ConstraintKind::LinearInequality { row: r2, bound: b2 },
            ) => rows_close(r1, r2) && close(*b1, *b2),
            (
                ConstraintKind::LinearEquality { row: r1, value: v1 },
                ConstraintKind::LinearEquality { row: r2, value: v2 },
            ) => rows_close(r1, r2) && close(*v1, *v2),
            (
                ConstraintKind::Bounds {
                    index: i1,
                    lower: l1,
                    upper: u1,
                },
                ConstraintKind::Bounds {
                    index: i2,
                    lower: l2,
                    upper: u2,
                },
            ) => {
                let side = |a: &Option<f64>, b: &Option<f64>| match (a, b) {
                    (None, None) => true,
                    (Some(x), Some(y)) => close(*x, *y),
                    _ => false,
                };
                i1 == i2 && side(l1, l2) && side(u1, u2)
            }
            (
                ConstraintKind::Conservation {
                    coefficients: c1,
                    value: v1,
                    tolerance: t1,
                },
                ConstraintKind::Conservation {
                    coefficients: c2,
                    value: v2,
                    tolerance: t2,
                },
            ) => rows_close(c1, c2) && close(*v1, *v2) && close(*t1, *t2),
            (
                ConstraintKind::NonlinearInequality { g: g1 },
                ConstraintKind::NonlinearInequality { g: g2 },
            ) => g1 == g2,
            _ => false,
        };
        let hardness = match (&self.hardness, &other.hardness) {
            (Hardness::Hard, Hardness::Hard) => true,
            (Hardness::Soft { weight: w1 }, Hardness::Soft { weight: w2 }) => close(*w1, *w2),
            _ => false,
        };
        kinds && hardness
    }
}

fn dot(row: &[f64], y: &[f64]) -> f64 {
    row.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn fmt_terms(f: &mut fmt::Formatter<'_>, row: &[f64]) -> fmt::Result {
    let mut wrote = false;
    for (i, c) in row.iter().enumerate() {
        if *c == 0.0 {
            continue;
        }
        if wrote {
            f.write_str(" + ")?;
        }
        write!(f, "{}*y[{}]", c, i)?;
        wrote = true;
    }
    if !wrote {
        // Grammar needs at least one term.
        f.write_str("0*y[0]")?;
    }
    Ok(())
}

/// Renders the constraint as one DSL statement; parsing the output yields a
/// structurally equal constraint.
impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.hardness {
            Hardness::Hard => f.write_str("hard: ")?,
            Hardness::Soft { weight } => write!(f, "soft({}): ", weight)?,
        }
        match &self.kind {
            ConstraintKind::LinearInequality { row, bound } => {
                fmt_terms(f, row)?;
                write!(f, " <= {}", bound)
            }
            ConstraintKind::LinearEquality { row, value } => {
                fmt_terms(f, row)?;
                write!(f, " == {}", value)
            }
            ConstraintKind::Bounds { index, lower, upper } => match (lower, upper) {
                (Some(l), Some(u)) => write!(f, "y[{}] in [{}, {}]", index, l, u),
                (Some(l), None) => write!(f, "y[{}] >= {}", index, l),
                (None, Some(u)) => write!(f, "y[{}] <= {}", index, u),
                (None, None) => write!(f, "y[{}] <= inf", index),
            },
            ConstraintKind::Conservation {
                coefficients,
                value,
                tolerance,
            } => {
                f.write_str("sum(")?;
                fmt_terms(f, coefficients)?;
                write!(f, ") == {} tol {}", value, tolerance)
            }
            ConstraintKind::NonlinearInequality { g } => write!(f, "g: {} <= 0", g),
        }
    }
}
