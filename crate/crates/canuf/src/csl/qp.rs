//! Dense dual active-set solver for the Euclidean projection
//!
//! ```text
//!     minimize   ½‖y − ŷ‖²
//!     subject to A_eq y = b_eq,  A_in y ≤ b_in
//! ```
//!
//! Goldfarb–Idnani scheme specialized to an identity Hessian: start from the
//! unconstrained optimum ŷ, repeatedly add the most violated constraint, and
//! take dual steps (dropping blocking rows) until primal feasible. The working
//! set always holds linearly independent rows, so the small Gram systems stay
//! well conditioned; factorizations are recomputed per step, which is cheap at
//! the output dimensions this solver targets.

use nalgebra::{DMatrix, DVector};

use super::{CslError, FeasibleSet};

/// Which block of the feasible set an active row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Equality,
    Inequality,
}

/// One row binding at the projection solution.
#[derive(Debug, Clone)]
pub struct ActiveRow {
    pub kind: RowKind,
    /// Index into the feasible set's equality or inequality block.
    pub index: usize,
    /// Id of the source constraint.
    pub source_id: String,
    /// Row in its original orientation.
    pub row: DVector<f64>,
    pub rhs: f64,
    /// KKT multiplier, signed with respect to the original orientation
    /// (nonnegative for inequality rows).
    pub multiplier: f64,
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    /// Feasible point Π_C(ŷ).
    pub point: DVector<f64>,
    /// Rows binding at the solution (all retained equalities plus the
    /// inequalities in the working set).
    pub active: Vec<ActiveRow>,
    /// ∂Π_C/∂ŷ from the active rows.
    pub jacobian: DMatrix<f64>,
    /// ‖Π_C(ŷ) − ŷ‖².
    pub squared_distance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Max of stationarity, feasibility and complementarity residuals.
    pub kkt_residual: f64,
    /// Degenerate (linearly dependent) rows dropped while solving.
    pub pruned_rows: usize,
}

/// Feasibility threshold for accepting a point; well below the 1e-6
/// projection tolerance the layer guarantees.
pub(super) const FEAS_TOL: f64 = 1e-9;
/// Pivot tolerance for detecting linearly dependent rows.
pub(super) const DEP_TOL: f64 = 1e-10;

struct Working<'a> {
    fs: &'a FeasibleSet,
    /// (kind, index, row-as-used, rhs-as-used, flipped)
    rows: Vec<(RowKind, usize, DVector<f64>, f64, bool)>,
    lambda: Vec<f64>,
}

impl<'a> Working<'a> {
    fn matrix(&self) -> DMatrix<f64> {
        let d = self.fs.d_y;
        let mut a = DMatrix::zeros(self.rows.len(), d);
        for (k, (_, _, row, _, _)) in self.rows.iter().enumerate() {
            a.row_mut(k).copy_from(&row.transpose());
        }
        a
    }

    fn rhs(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.3))
    }

    /// Gram solve M t = v with M = A Aᵀ.
    fn gram_solve(&self, a: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>, CslError> {
        let m = a * a.transpose();
        m.cholesky()
            .map(|ch| ch.solve(v))
            .ok_or_else(|| CslError::Infeasible {
                detail: "working-set Gram matrix lost rank".to_string(),
            })
    }

    /// Optimal point and multipliers for the subproblem where every working
    /// row is tight.
    fn resolve(&mut self, yhat: &DVector<f64>) -> Result<DVector<f64>, CslError> {
        if self.rows.is_empty() {
            self.lambda.clear();
            return Ok(yhat.clone());
        }
        let a = self.matrix();
        let resid = &a * yhat - self.rhs();
        let lam = self.gram_solve(&a, &resid)?;
        let y = yhat - a.transpose() * &lam;
        self.lambda = lam.iter().copied().collect();
        Ok(y)
    }

    /// Component of `v` orthogonal to the working rows, and the dual
    /// direction r = M⁻¹ A v.
    fn decompose(&self, v: &DVector<f64>) -> Result<(DVector<f64>, Vec<f64>), CslError> {
        if self.rows.is_empty() {
            return Ok((v.clone(), Vec::new()));
        }
        let a = self.matrix();
        let av = &a * v;
        let r = self.gram_solve(&a, &av)?;
        let z = v - a.transpose() * &r;
        Ok((z, r.iter().copied().collect()))
    }
}

/// Project `yhat` onto the feasible set.
pub(super) fn solve_projection(
    fs: &FeasibleSet,
    yhat: &DVector<f64>,
    max_iterations: usize,
) -> Result<ProjectionResult, CslError> {
    if yhat.len() != fs.d_y {
        return Err(CslError::DimensionMismatch {
            expected: fs.d_y,
            got: yhat.len(),
        });
    }
    let mut w = Working {
        fs,
        rows: Vec::new(),
        lambda: Vec::new(),
    };
    let mut pruned = 0usize;
    let mut iterations = 0usize;
    let mut y = yhat.clone();

    // Equalities enter the working set first and are never dropped.
    for (k, (row, rhs)) in fs.eq_rows().enumerate() {
        iterations += 1;
        let (z, _) = w.decompose(&row)?;
        let s = row.dot(&y) - rhs;
        if z.norm() <= DEP_TOL * row.norm().max(1.0) {
            if s.abs() > FEAS_TOL {
                return Err(CslError::Infeasible {
                    detail: format!(
                        "equality row {k} is inconsistent with the preceding equalities (residual {s:.3e})"
                    ),
                });
            }
            pruned += 1;
            continue;
        }
        // Flip so the addition step below is nonnegative; equality
        // multipliers are free, sign restored in the report.
        let flip = s < 0.0;
        let (row, rhs) = if flip { (-row, -rhs) } else { (row, rhs) };
        w.rows.push((RowKind::Equality, k, row, rhs, flip));
        y = w.resolve(yhat)?;
    }

    loop {
        if iterations >= max_iterations {
            let best = assemble(fs, yhat, &w, y.clone(), iterations, false, pruned);
            return Err(CslError::NoConvergence {
                iterations,
                best: Box::new(best),
            });
        }
        iterations += 1;

        // Guard: re-solving can reveal an inequality multiplier that drifted
        // negative; drop it before looking at violations.
        if let Some(worst) = most_negative_inequality(&w) {
            w.rows.remove(worst);
            y = w.resolve(yhat)?;
            continue;
        }

        let Some((p, _)) = most_violated_inequality(fs, &w, &y) else {
            break;
        };
        add_inequality(fs, &mut w, &mut y, yhat, p, &mut iterations, max_iterations)?;
    }

    let result = assemble(fs, yhat, &w, y, iterations, true, pruned);
    if result.kkt_residual >= 1e-6 {
        let iterations = result.iterations;
        return Err(CslError::NoConvergence {
            iterations,
            best: Box::new(result),
        });
    }
    Ok(result)
}

fn most_negative_inequality(w: &Working) -> Option<usize> {
    let mut worst: Option<(usize, f64)> = None;
    for (k, ((kind, ..), lam)) in w.rows.iter().zip(&w.lambda).enumerate() {
        if *kind == RowKind::Inequality && *lam < -DEP_TOL {
            if worst.map_or(true, |(_, v)| *lam < v) {
                worst = Some((k, *lam));
            }
        }
    }
    worst.map(|(k, _)| k)
}

fn most_violated_inequality(
    fs: &FeasibleSet,
    w: &Working,
    y: &DVector<f64>,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, (row, rhs)) in fs.in_rows().enumerate() {
        if w.rows.iter().any(|(kind, idx, ..)| *kind == RowKind::Inequality && *idx == k) {
            continue;
        }
        let s = row.dot(y) - rhs;
        if s > FEAS_TOL && best.map_or(true, |(_, v)| s > v) {
            best = Some((k, s));
        }
    }
    best
}

/// Goldfarb–Idnani addition of inequality `p`: grow its multiplier, dropping
/// blocking rows on partial steps, until `p` becomes tight.
fn add_inequality(
    fs: &FeasibleSet,
    w: &mut Working,
    y: &mut DVector<f64>,
    yhat: &DVector<f64>,
    p: usize,
    iterations: &mut usize,
    max_iterations: usize,
) -> Result<(), CslError> {
    let (a_p, b_p) = fs.in_row(p);
    let mut lambda_p = 0.0;
    loop {
        *iterations += 1;
        if *iterations >= max_iterations {
            return Ok(()); // outer loop raises NoConvergence
        }
        let s = a_p.dot(y) - b_p;
        if s <= FEAS_TOL {
            // Became satisfied while dropping rows; p stays out.
            if lambda_p > 0.0 {
                // Shouldn't happen: positive multiplier requires tightness.
                w.rows.push((RowKind::Inequality, p, a_p.clone(), b_p, false));
                w.lambda.push(lambda_p);
            }
            return Ok(());
        }
        let (z, r) = w.decompose(&a_p)?;
        let z2 = z.norm_squared();
        let dependent = z.norm() <= DEP_TOL * a_p.norm().max(1.0);
        let t2 = if dependent { f64::INFINITY } else { s / z2 };

        // Blocking: working inequalities whose multiplier shrinks to zero.
        let mut t1 = f64::INFINITY;
        let mut blocker = None;
        for (k, ((kind, ..), lam)) in w.rows.iter().zip(&w.lambda).enumerate() {
            if *kind != RowKind::Inequality {
                continue;
            }
            if r[k] > DEP_TOL {
                let t = lam / r[k];
                if t < t1 {
                    t1 = t;
                    blocker = Some(k);
                }
            }
        }

        if t2.is_infinite() && t1.is_infinite() {
            return Err(CslError::Infeasible {
                detail: format!(
                    "inequality row {p} cannot be satisfied together with the working set"
                ),
            });
        }

        if t2 <= t1 {
            // Full step: p becomes tight and joins the working set.
            for (lam, rk) in w.lambda.iter_mut().zip(&r) {
                *lam -= t2 * rk;
            }
            lambda_p += t2;
            *y -= t2 * &z;
            w.rows.push((RowKind::Inequality, p, a_p.clone(), b_p, false));
            w.lambda.push(lambda_p);
            // Fresh resolve keeps y and λ numerically consistent.
            *y = w.resolve(yhat)?;
            return Ok(());
        }

        // Partial step: blocking row leaves, keep growing λ_p.
        let k = blocker.expect("finite t1 implies a blocker");
        for (lam, rk) in w.lambda.iter_mut().zip(&r) {
            *lam -= t1 * rk;
        }
        lambda_p += t1;
        if !dependent {
            *y -= t1 * &z;
        }
        w.rows.remove(k);
        w.lambda.remove(k);
    }
}

fn assemble(
    fs: &FeasibleSet,
    yhat: &DVector<f64>,
    w: &Working,
    y: DVector<f64>,
    iterations: usize,
    converged: bool,
    pruned_rows: usize,
) -> ProjectionResult {
    let active: Vec<ActiveRow> = w
        .rows
        .iter()
        .zip(&w.lambda)
        .map(|((kind, idx, row, rhs, flipped), lam)| {
            let sign = if *flipped { -1.0 } else { 1.0 };
            ActiveRow {
                kind: *kind,
                index: *idx,
                source_id: fs.row_source(*kind, *idx).to_string(),
                row: row * sign,
                rhs: rhs * sign,
                multiplier: lam * sign,
            }
        })
        .collect();

    // Stationarity: y − ŷ + Σ λ a = 0.
    let mut stat = y.clone() - yhat;
    for ar in &active {
        stat += ar.multiplier * &ar.row;
    }
    let mut kkt: f64 = stat.amax();
    for (row, rhs) in fs.eq_rows() {
        kkt = kkt.max((row.dot(&y) - rhs).abs());
    }
    for (row, rhs) in fs.in_rows() {
        kkt = kkt.max(row.dot(&y) - rhs);
    }
    for ar in &active {
        if ar.kind == RowKind::Inequality {
            kkt = kkt.max(-ar.multiplier);
            kkt = kkt.max((ar.multiplier * (ar.row.dot(&y) - ar.rhs)).abs());
        }
    }
    kkt = kkt.max(0.0);

    let jacobian = super::jacobian_from_rows(fs.d_y, active.iter().map(|a| &a.row));
    let squared_distance = (&y - yhat).norm_squared();
    ProjectionResult {
        point: y,
        active,
        jacobian,
        squared_distance,
        iterations,
        converged,
        kkt_residual: kkt,
        pruned_rows,
    }
}
