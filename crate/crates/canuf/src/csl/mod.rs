//! Differentiable constraint-satisfaction layer.
//!
//! Predictions are projected onto the feasible region of the hard constraint
//! set (nonlinear members locally linearized), the projection Jacobian is the
//! implicit-function-theorem projector I − Aᵀ(AAᵀ)⁻¹A over the active rows,
//! and Gaussian uncertainty propagates through the projection as JΣJᵀ.
//!
//! Feasible sets are immutable once built; projection is a pure function of
//! (set, input) and safe to run concurrently across inputs.

mod qp;

pub use qp::{ActiveRow, ProjectionResult, RowKind};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{linearize, Constraint, ConstraintKind, EvalError};

/// Hard constraints compiled to dense rows over the output dimension.
#[derive(Debug, Clone)]
pub struct FeasibleSet {
    d_y: usize,
    eq: Vec<(DVector<f64>, f64, String)>,
    ineq: Vec<(DVector<f64>, f64, String)>,
    /// Nonlinear sources retained for re-linearization.
    nonlinear: Vec<Constraint>,
}

#[derive(Debug, Error)]
pub enum CslError {
    #[error("soft constraint `{id}` cannot enter the hard projection set")]
    SoftConstraintInHardSet { id: String },
    #[error("infeasible constraint system: {detail}")]
    Infeasible { detail: String },
    #[error("projection did not converge within {iterations} iterations")]
    NoConvergence {
        iterations: usize,
        /// Best iterate reached.
        best: Box<ProjectionResult>,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Domain(#[from] EvalError),
    #[error("covariance matrix is not symmetric (tolerance 1e-10)")]
    AsymmetricCovariance,
}

impl FeasibleSet {
    /// Compile hard constraints into rows, linearizing nonlinear members at
    /// `anchor`. Errors if any constraint is soft, a linearization hits a
    /// domain violation, or the resulting linear system is empty of feasible
    /// points (checked by a projection solve).
    pub fn build(constraints: &[Constraint], anchor: &[f64], x: &[f64]) -> Result<Self, CslError> {
        let fs = Self::build_unchecked(constraints, anchor, x)?;
        // Feasibility probe; any feasible point will do.
        fs.project(&DVector::from_column_slice(anchor))?;
        Ok(fs)
    }

    pub(crate) fn build_unchecked(
        constraints: &[Constraint],
        anchor: &[f64],
        x: &[f64],
    ) -> Result<Self, CslError> {
        let d_y = anchor.len();
        let mut fs = FeasibleSet {
            d_y,
            eq: Vec::new(),
            ineq: Vec::new(),
            nonlinear: Vec::new(),
        };
        for c in constraints {
            if !c.hardness.is_hard() {
                return Err(CslError::SoftConstraintInHardSet { id: c.id.clone() });
            }
            match &c.kind {
                ConstraintKind::LinearInequality { row, bound } => {
                    fs.push_ineq(dense(row, d_y), *bound, &c.id)?;
                }
                ConstraintKind::LinearEquality { row, value } => {
                    fs.push_eq(dense(row, d_y), *value, &c.id)?;
                }
                ConstraintKind::Bounds { index, lower, upper } => {
                    if let Some(u) = upper {
                        let mut row = DVector::zeros(d_y);
                        row[*index] = 1.0;
                        fs.push_ineq(row, *u, &c.id)?;
                    }
                    if let Some(l) = lower {
                        let mut row = DVector::zeros(d_y);
                        row[*index] = -1.0;
                        fs.push_ineq(row, -*l, &c.id)?;
                    }
                }
                ConstraintKind::Conservation {
                    coefficients,
                    value,
                    ..
                } => {
                    fs.push_eq(dense(coefficients, d_y), *value, &c.id)?;
                }
                ConstraintKind::NonlinearInequality { g } => {
                    let lin = linearize(g, &c.id, anchor, x)?;
                    let (row, b) = lin.as_halfspace();
                    fs.push_ineq(DVector::from_vec(row), b, &c.id)?;
                    fs.nonlinear.push(c.clone());
                }
            }
        }
        Ok(fs)
    }

    fn push_ineq(&mut self, row: DVector<f64>, b: f64, id: &str) -> Result<(), CslError> {
        if row.norm() <= 1e-14 {
            // 0ᵀy ≤ b: vacuous or unsatisfiable outright.
            if b < -1e-12 {
                return Err(CslError::Infeasible {
                    detail: format!("constraint `{id}` reduces to 0 ≤ {b}"),
                });
            }
            return Ok(());
        }
        self.ineq.push((row, b, id.to_string()));
        Ok(())
    }

    fn push_eq(&mut self, row: DVector<f64>, b: f64, id: &str) -> Result<(), CslError> {
        if row.norm() <= 1e-14 {
            if b.abs() > 1e-12 {
                return Err(CslError::Infeasible {
                    detail: format!("constraint `{id}` reduces to 0 = {b}"),
                });
            }
            return Ok(());
        }
        self.eq.push((row, b, id.to_string()));
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.d_y
    }

    pub fn num_equalities(&self) -> usize {
        self.eq.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.ineq.len()
    }

    pub fn has_nonlinear(&self) -> bool {
        !self.nonlinear.is_empty()
    }

    pub(crate) fn eq_rows(&self) -> impl Iterator<Item = (DVector<f64>, f64)> + '_ {
        self.eq.iter().map(|(r, b, _)| (r.clone(), *b))
    }

    pub(crate) fn in_rows(&self) -> impl Iterator<Item = (DVector<f64>, f64)> + '_ {
        self.ineq.iter().map(|(r, b, _)| (r.clone(), *b))
    }

    pub(crate) fn in_row(&self, k: usize) -> (DVector<f64>, f64) {
        (self.ineq[k].0.clone(), self.ineq[k].1)
    }

    pub(crate) fn row_source(&self, kind: RowKind, idx: usize) -> &str {
        match kind {
            RowKind::Equality => &self.eq[idx].2,
            RowKind::Inequality => &self.ineq[idx].2,
        }
    }

    /// Max violation of the compiled rows at `y`.
    pub fn max_row_violation(&self, y: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        for (row, b, _) in &self.eq {
            v = v.max((row.dot(y) - b).abs());
        }
        for (row, b, _) in &self.ineq {
            v = v.max(row.dot(y) - b);
        }
        v
    }

    /// Euclidean projection with the default iteration budget of
    /// 100 × the number of rows.
    pub fn project(&self, yhat: &DVector<f64>) -> Result<ProjectionResult, CslError> {
        let budget = 100 * (self.eq.len() + self.ineq.len()).max(1);
        self.project_with_budget(yhat, budget)
    }

    pub fn project_with_budget(
        &self,
        yhat: &DVector<f64>,
        max_iterations: usize,
    ) -> Result<ProjectionResult, CslError> {
        qp::solve_projection(self, yhat, max_iterations)
    }
}

fn dense(row: &[f64], d_y: usize) -> DVector<f64> {
    let mut v = DVector::zeros(d_y);
    for (i, c) in row.iter().enumerate().take(d_y) {
        v[i] = *c;
    }
    v
}

/// Projector I − Aᵀ(AAᵀ)⁻¹A over the given rows, with dependent rows pruned
/// by a modified Gram–Schmidt sweep at pivot tolerance 1e-10.
pub(crate) fn jacobian_from_rows<'a>(
    d_y: usize,
    rows: impl Iterator<Item = &'a DVector<f64>>,
) -> DMatrix<f64> {
    let kept = prune_rows(rows);
    if kept.is_empty() {
        return DMatrix::identity(d_y, d_y);
    }
    let mut a = DMatrix::zeros(kept.len(), d_y);
    for (k, row) in kept.iter().enumerate() {
        a.row_mut(k).copy_from(&row.transpose());
    }
    let gram = &a * a.transpose();
    let inv = gram
        .cholesky()
        .expect("pruned active rows are independent")
        .inverse();
    DMatrix::identity(d_y, d_y) - a.transpose() * inv * a
}

fn prune_rows<'a>(rows: impl Iterator<Item = &'a DVector<f64>>) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for row in rows {
        let mut v = row.clone();
        for q in &basis {
            let c = q.dot(&v);
            v -= c * q;
        }
        if v.norm() > qp::DEP_TOL * row.norm().max(1.0) {
            let n = v.norm();
            basis.push(v / n);
            kept.push(row.clone());
        }
    }
    kept
}

/// Eq.-14 Jacobian recomputed from a projection's active rows.
pub fn projection_jacobian(fs: &FeasibleSet, result: &ProjectionResult) -> DMatrix<f64> {
    jacobian_from_rows(fs.d_y, result.active.iter().map(|a| &a.row))
}

/// Push a covariance through the projection: Σ_y = J Σ_ŷ Jᵀ.
pub fn propagate_uncertainty(
    j: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
) -> Result<DMatrix<f64>, CslError> {
    if sigma.nrows() != sigma.ncols() {
        return Err(CslError::DimensionMismatch {
            expected: sigma.nrows(),
            got: sigma.ncols(),
        });
    }
    if j.ncols() != sigma.nrows() {
        return Err(CslError::DimensionMismatch {
            expected: j.ncols(),
            got: sigma.nrows(),
        });
    }
    let asym = (sigma - sigma.transpose()).amax();
    if asym > 1e-10 {
        return Err(CslError::AsymmetricCovariance);
    }
    let out = j * sigma * j.transpose();
    // Exact symmetry despite rounding.
    Ok((&out + out.transpose()) * 0.5)
}

/// Outcome of the alternating linearize/project loop.
#[derive(Debug, Clone)]
pub struct RelinearizedProjection {
    pub result: ProjectionResult,
    pub rounds: usize,
    /// Step norms stopped shrinking; the best-feasible iterate was returned.
    pub oscillated: bool,
}

/// Projection with nonlinear constraints handled by alternating local
/// linearization (around the current iterate) and projection of the original
/// input, for up to `max_outer` rounds (inference default 5). Stops when the
/// step norm drops below 1e-8 or all source constraints hold within 1e-6.
pub fn project_with_relinearization(
    constraints: &[Constraint],
    yhat: &[f64],
    x: &[f64],
    max_outer: usize,
) -> Result<RelinearizedProjection, CslError> {
    let yhat_v = DVector::from_column_slice(yhat);
    let fs = FeasibleSet::build(constraints, yhat, x)?;
    if !fs.has_nonlinear() {
        let result = fs.project(&yhat_v)?;
        return Ok(RelinearizedProjection {
            result,
            rounds: 1,
            oscillated: false,
        });
    }

    let worst_violation = |point: &DVector<f64>| -> f64 {
        let y: Vec<f64> = point.iter().copied().collect();
        constraints
            .iter()
            .map(|c| c.violation(&y, x).unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    };

    let mut anchor = yhat_v.clone();
    let mut best: Option<(f64, ProjectionResult)> = None;
    let mut steps: Vec<f64> = Vec::new();
    let mut oscillated = false;

    for round in 0..max_outer.max(1) {
        let anchor_slice: Vec<f64> = anchor.iter().copied().collect();
        let fs_round = if round == 0 {
            fs.clone()
        } else {
            match FeasibleSet::build_unchecked(constraints, &anchor_slice, x) {
                Ok(f) => f,
                Err(_) => break,
            }
        };
        let res = match fs_round.project(&yhat_v) {
            Ok(r) => r,
            Err(CslError::NoConvergence { best: b, .. }) => *b,
            Err(e) if round == 0 => return Err(e),
            Err(_) => break,
        };
        let step = (&res.point - &anchor).norm();
        let violation = worst_violation(&res.point);
        if best.as_ref().map_or(true, |(bv, br)| {
            violation < *bv || (violation == *bv && res.squared_distance < br.squared_distance)
        }) {
            best = Some((violation, res.clone()));
        }
        anchor = res.point.clone();
        steps.push(step);

        if violation <= 1e-6 || step < 1e-8 {
            let mut result = res;
            result.converged = violation <= 1e-6;
            return Ok(RelinearizedProjection {
                result,
                rounds: round + 1,
                oscillated: false,
            });
        }
        if steps.len() >= 3 {
            let n = steps.len();
            if steps[n - 1] >= steps[n - 2] && steps[n - 2] >= steps[n - 3] {
                oscillated = true;
                break;
            }
        }
    }

    let rounds = steps.len();
    let (violation, mut result) = best.expect("at least one projection ran");
    result.converged = violation <= 1e-6;
    Ok(RelinearizedProjection {
        result,
        rounds,
        oscillated,
    })
}
