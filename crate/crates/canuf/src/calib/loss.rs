//! Differentiable loss components and the composite training objective
//!
//! ```text
//!     L = L_pred + α·L_ELBO + β·L_ECE + γ·L_constraint
//! ```
//!
//! L_pred is the heteroscedastic Gaussian NLL evaluated at the projected
//! means with gradients routed through the projection Jacobian, L_ELBO is the
//! variational objective (its likelihood term sees the raw outputs, so the
//! two overlap by construction — they are kept as distinct terms exactly as
//! the composite lists them), L_ECE is the soft-binned calibration loss over
//! coverage events, and L_constraint penalizes soft-constraint violations of
//! the pre-projection outputs.
//!
//! The coverage events feeding L_ECE pair constant nominal levels with
//! piecewise-constant coverage indicators, so the ECE term contributes value
//! but no parameter gradient almost everywhere; finite differences of the
//! composite agree with the analytic gradients.

use nalgebra::DVector;

use super::{adjust_variance, bin_centers, coverage_events, CalibError};
use crate::bnn::{
    elbo_loss, heteroscedastic_nll, nll_cotangents, GradientBuffer, NoiseDraw,
    PredictiveDistribution, VariationalModel,
};
use crate::csl::FeasibleSet;
use crate::expr::{Constraint, ConstraintKind, Hardness};

/// Weights of the composite objective plus the soft-binning temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// ELBO weight α.
    pub alpha: f64,
    /// Calibration-loss weight β.
    pub beta: f64,
    /// Constraint-penalty weight γ.
    pub gamma: f64,
    /// Infeasibility sensitivity λ.
    pub lambda: f64,
    /// Soft-binning temperature τ.
    pub tau_bin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.1,
            gamma: 10.0,
            lambda: 0.5,
            tau_bin: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), CalibError> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ] {
            if v < 0.0 {
                return Err(CalibError::NegativeInput(format!("{name} = {v}")));
            }
        }
        if self.tau_bin <= 0.0 {
            return Err(CalibError::NonPositiveTemperature(self.tau_bin));
        }
        Ok(())
    }
}

/// Soft-binned differentiable ECE (value, gradient w.r.t. p):
/// Σ_m Σ_i w_im·|r_i − p_i| with Gaussian-kernel softmax weights
/// w_im over bin centers and |·| smoothed as √((r−p)² + 1e-12).
pub fn soft_ece_loss(
    p: &[f64],
    r: &[f64],
    centers: &[f64],
    tau_bin: f64,
) -> Result<(f64, Vec<f64>), CalibError> {
    if tau_bin <= 0.0 {
        return Err(CalibError::NonPositiveTemperature(tau_bin));
    }
    if p.len() != r.len() {
        return Err(CalibError::LengthMismatch {
            p: p.len(),
            r: r.len(),
        });
    }
    const SMOOTH: f64 = 1e-12;
    let inv_2tau2 = 1.0 / (2.0 * tau_bin * tau_bin);
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for (i, (pi, ri)) in p.iter().zip(r).enumerate() {
        // Softmax over bins, max-shifted for stability at small τ.
        let logits: Vec<f64> = centers.iter().map(|b| -(pi - b) * (pi - b) * inv_2tau2).collect();
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let exps: Vec<f64> = logits.iter().map(|u| (u - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let w: Vec<f64> = exps.iter().map(|e| e / z).collect();

        let s = ((ri - pi) * (ri - pi) + SMOOTH).sqrt();
        let ds = -(ri - pi) / s;
        // du_m/dp = −(p−b_m)/τ²; dw_m/dp = w_m(du_m − Σ_j w_j du_j).
        let du: Vec<f64> = centers.iter().map(|b| -2.0 * (pi - b) * inv_2tau2).collect();
        let du_bar: f64 = w.iter().zip(&du).map(|(wi, d)| wi * d).sum();
        let mut g = 0.0;
        for (wm, dum) in w.iter().zip(&du) {
            value += wm * s;
            g += wm * (dum - du_bar) * s + wm * ds;
        }
        grad[i] = g;
    }
    Ok((value, grad))
}

/// Weighted squared-hinge penalty over soft constraints at the raw
/// prediction: Σ_k w_k·max(0, g_k)² for inequality forms, w_k·(residual/tol)²
/// for conservation, w_k·residual² for plain equalities.
pub fn constraint_penalty(
    yhat: &[f64],
    x: &[f64],
    soft: &[Constraint],
) -> Result<(f64, Vec<f64>), CalibError> {
    let mut value = 0.0;
    let mut grad = vec![0.0; yhat.len()];
    for c in soft {
        let weight = match c.hardness {
            Hardness::Soft { weight } => weight,
            Hardness::Hard => {
                return Err(CalibError::HardConstraintInPenalty { id: c.id.clone() })
            }
        };
        match &c.kind {
            ConstraintKind::LinearInequality { row, bound } => {
                let v: f64 = row.iter().zip(yhat).map(|(a, y)| a * y).sum::<f64>() - bound;
                if v > 0.0 {
                    value += weight * v * v;
                    for (g, a) in grad.iter_mut().zip(row) {
                        *g += weight * 2.0 * v * a;
                    }
                }
            }
            ConstraintKind::LinearEquality { row, value: b } => {
                let v: f64 = row.iter().zip(yhat).map(|(a, y)| a * y).sum::<f64>() - b;
                value += weight * v * v;
                for (g, a) in grad.iter_mut().zip(row) {
                    *g += weight * 2.0 * v * a;
                }
            }
            ConstraintKind::Bounds { index, lower, upper } => {
                if let Some(u) = upper {
                    let v = yhat[*index] - u;
                    if v > 0.0 {
                        value += weight * v * v;
                        grad[*index] += weight * 2.0 * v;
                    }
                }
                if let Some(l) = lower {
                    let v = l - yhat[*index];
                    if v > 0.0 {
                        value += weight * v * v;
                        grad[*index] -= weight * 2.0 * v;
                    }
                }
            }
            ConstraintKind::Conservation {
                coefficients,
                value: cval,
                tolerance,
            } => {
                let resid: f64 =
                    coefficients.iter().zip(yhat).map(|(a, y)| a * y).sum::<f64>() - cval;
                let scaled = resid / tolerance;
                value += weight * scaled * scaled;
                for (g, a) in grad.iter_mut().zip(coefficients) {
                    *g += weight * 2.0 * resid / (tolerance * tolerance) * a;
                }
            }
            ConstraintKind::NonlinearInequality { g } => {
                let v = g.evaluate(yhat, x)?;
                if v > 0.0 {
                    let gg = g.gradient(yhat, x)?;
                    value += weight * v * v;
                    for (gi, d) in grad.iter_mut().zip(&gg) {
                        *gi += weight * 2.0 * v * d;
                    }
                }
            }
        }
    }
    Ok((value, grad))
}

/// How the composite loss projects raw predictions.
#[derive(Debug, Clone, Copy)]
pub enum ProjectionPlan<'a> {
    /// Constraint layer disabled: identity projection.
    None,
    /// One feasible set for every sample (purely linear constraints, or a
    /// shared linearization snapshot).
    Shared(&'a FeasibleSet),
    /// Per-sample linearization snapshots, refreshed by the trainer on its
    /// own cadence.
    PerSample(&'a [FeasibleSet]),
}

impl ProjectionPlan<'_> {
    fn set_for(&self, i: usize) -> Option<&FeasibleSet> {
        match self {
            ProjectionPlan::None => None,
            ProjectionPlan::Shared(fs) => Some(fs),
            ProjectionPlan::PerSample(sets) => Some(&sets[i]),
        }
    }
}

/// Value of each composite term (unweighted) plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub pred: f64,
    pub elbo: f64,
    pub ece: f64,
    pub constraint: f64,
}

/// Composite objective over a mini-batch, with gradients for every
/// variational parameter. `n_total` is the dataset size (ELBO scaling);
/// noise draws fix the Monte Carlo samples so callers control determinism.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    model: &VariationalModel,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    noises: &[NoiseDraw],
    plan: ProjectionPlan<'_>,
    soft: &[Constraint],
    weights: &LossWeights,
    n_total: usize,
) -> Result<(LossBreakdown, GradientBuffer), CalibError> {
    weights.validate()?;
    assert_eq!(xs.len(), ys.len(), "batch features/targets length mismatch");
    assert!(!xs.is_empty(), "batch must be nonempty");
    let b = xs.len();
    let s_mc = noises.len().max(1);
    let per_term = 1.0 / (s_mc as f64 * b as f64);

    // α·L_ELBO first: the bnn loss already handles its own scaling.
    let (elbo_value, mut grads) = elbo_loss(model, xs, ys, noises, n_total);
    grads.scale(weights.alpha);

    let d = model.d_y;
    let mut pred_sum = 0.0;
    let mut penalty_sum = 0.0;
    // Per-sample accumulators for the coverage events.
    let mut proj_means = vec![vec![DVector::<f64>::zeros(d); 0]; b];
    let mut aleat_acc = vec![vec![0.0; d]; b];
    let mut dist_acc = vec![0.0; b];

    for noise in noises {
        let sampled = model.realize(noise);
        for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
            let (mean, logvar, tape) = sampled
                .forward_tape(x)
                .expect("batch dimensions validated by caller");

            // Projection of this sample's raw mean.
            let (z, jac, dist2) = match plan.set_for(i) {
                Some(fs) => {
                    let res = fs.project(&mean)?;
                    (res.point, Some(res.jacobian), res.squared_distance)
                }
                None => (mean.clone(), None, 0.0),
            };

            // L_pred at the projected mean; gradient through the Jacobian.
            pred_sum += heteroscedastic_nll(y, &z, &logvar);
            let (d_z, mut d_logvar) = nll_cotangents(y, &z, &logvar);
            let mut d_mean = match &jac {
                Some(j) => j.transpose() * &d_z,
                None => d_z,
            };
            d_mean.scale_mut(per_term);
            d_logvar.scale_mut(per_term);

            // γ·L_constraint at the raw mean.
            if weights.gamma > 0.0 && !soft.is_empty() {
                let raw: Vec<f64> = mean.iter().copied().collect();
                let xv: Vec<f64> = x.iter().copied().collect();
                let (v, gv) = constraint_penalty(&raw, &xv, soft)?;
                penalty_sum += v;
                for (dm, g) in d_mean.iter_mut().zip(&gv) {
                    *dm += weights.gamma * per_term * g;
                }
            }

            sampled.backward(model, &tape, &d_mean, &d_logvar, &mut grads);

            proj_means[i].push(z);
            for k in 0..d {
                aleat_acc[i][k] += logvar[k].exp();
            }
            dist_acc[i] += dist2;
        }
    }

    // L_ECE over coverage events built from the batch-level Monte Carlo
    // summaries (constant levels, indicator outcomes: value-only term).
    let mut ece_value = 0.0;
    if weights.beta > 0.0 {
        let centers = bin_centers(10);
        let mut ps = Vec::new();
        let mut rs = Vec::new();
        for i in 0..b {
            let means = &proj_means[i];
            let mut mu = DVector::<f64>::zeros(d);
            for m in means {
                mu += m;
            }
            mu /= s_mc as f64;
            let mut epist = vec![0.0; d];
            for m in means {
                for k in 0..d {
                    let r = m[k] - mu[k];
                    epist[k] += r * r / s_mc as f64;
                }
            }
            let total: Vec<f64> = (0..d)
                .map(|k| epist[k] + aleat_acc[i][k] / s_mc as f64)
                .collect();
            let adjusted = adjust_variance(&total, dist_acc[i] / s_mc as f64, weights.lambda)?;
            let pred = PredictiveDistribution {
                mean: mu.iter().copied().collect(),
                epistemic: epist,
                aleatoric: (0..d).map(|k| aleat_acc[i][k] / s_mc as f64).collect(),
                total,
                samples: s_mc,
                projected_mean: None,
                propagated_covariance: None,
                adjusted_variance: Some(adjusted),
                projection_distance_sq: Some(dist_acc[i] / s_mc as f64),
            };
            let yv: Vec<f64> = ys[i].iter().copied().collect();
            for (p, r) in coverage_events(&pred, &yv, &centers)? {
                ps.push(p);
                rs.push(r);
            }
        }
        let (v, _) = soft_ece_loss(&ps, &rs, &centers, weights.tau_bin)?;
        ece_value = v;
    }

    let pred = pred_sum * per_term;
    let constraint = penalty_sum * per_term;
    let total = pred + weights.alpha * elbo_value + weights.beta * ece_value
        + weights.gamma * constraint;
    Ok((
        LossBreakdown {
            total,
            pred,
            elbo: elbo_value,
            ece: ece_value,
            constraint,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::bin_centers;
    use crate::expr::parse_constraint;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_ece_zero_residual_hits_smoothing_floor() {
        let p = [0.15, 0.35, 0.8];
        let (v, _) = soft_ece_loss(&p, &p, &bin_centers(10), 0.05).unwrap();
        assert!(v <= 1e-5, "value {v}");
    }

    #[test]
    fn soft_ece_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers = bin_centers(10);
        for _ in 0..100 {
            let n = rng.gen_range(1..8);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..0.99)).collect();
            let r: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let tau = rng.gen_range(0.02..0.2);
            let (_, grad) = soft_ece_loss(&p, &r, &centers, tau).unwrap();
            let h = 1e-6;
            for i in 0..n {
                let mut pp = p.clone();
                pp[i] += h;
                let (vp, _) = soft_ece_loss(&pp, &r, &centers, tau).unwrap();
                pp[i] -= 2.0 * h;
                let (vm, _) = soft_ece_loss(&pp, &r, &centers, tau).unwrap();
                let fd = (vp - vm) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-5, "i {i}: fd {fd} vs {g}", g = grad[i]);
            }
        }
    }

    #[test]
    fn soft_ece_hard_assignment_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let centers = bin_centers(10);
        let n = 50;
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let r: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let (soft, _) = soft_ece_loss(&p, &r, &centers, 1e-4).unwrap();
        // Hard binning: each event contributes |r−p| to exactly one bin, so
        // the reference is the plain residual sum over the partition.
        let hard: f64 = p.iter().zip(&r).map(|(pi, ri)| (ri - pi).abs()).sum();
        assert!(
            (soft - hard).abs() < 1e-6,
            "soft {soft} vs hard-binned {hard}"
        );
    }

    #[test]
    fn penalty_zero_when_satisfied() {
        let soft = [parse_constraint("soft(1.0): y[0] <= 1.0", 1, 0).unwrap()];
        let (v, g) = constraint_penalty(&[0.5], &[], &soft).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn penalty_hinge_square_arithmetic() {
        let soft = [parse_constraint("soft(1.0): y[0] <= 1.0", 1, 0).unwrap()];
        let (v, g) = constraint_penalty(&[2.0], &[], &soft).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(g, vec![2.0]);
    }

    #[test]
    fn penalty_rejects_hard_constraints() {
        let hard = [parse_constraint("hard: y[0] <= 1.0", 1, 0).unwrap()];
        assert!(matches!(
            constraint_penalty(&[2.0], &[], &hard),
            Err(CalibError::HardConstraintInPenalty { .. })
        ));
    }

    #[test]
    fn penalty_gradients_match_finite_differences() {
        let soft = [
            parse_constraint("soft(0.7): y[0] <= 0.4", 2, 1).unwrap(),
            parse_constraint("soft(1.3): sum(1.0*y[0] + 2.0*y[1]) == 1.0 tol 0.1", 2, 1).unwrap(),
            parse_constraint("soft(0.5): g: y[1]^2 + x[0] * y[0] - 0.2 <= 0", 2, 1).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let y = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let x = [rng.gen_range(-1.0..1.0)];
            let (_, grad) = constraint_penalty(&y, &x, &soft).unwrap();
            let h = 1e-6;
            for i in 0..2 {
                let mut yp = y;
                yp[i] += h;
                let (vp, _) = constraint_penalty(&yp, &x, &soft).unwrap();
                yp[i] -= 2.0 * h;
                let (vm, _) = constraint_penalty(&yp, &x, &soft).unwrap();
                let fd = (vp - vm) / (2.0 * h);
                let rel = (fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-6, "dim {i}: fd {fd} vs {}", grad[i]);
            }
        }
    }

    fn tiny_setup() -> (VariationalModel, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let model = VariationalModel::init(2, &[4], 2, 1.0, 17).unwrap();
        let xs = vec![
            DVector::from_column_slice(&[0.4, -0.2]),
            DVector::from_column_slice(&[-0.8, 0.5]),
        ];
        let ys = vec![
            DVector::from_column_slice(&[0.3, 0.7]),
            DVector::from_column_slice(&[-0.1, 1.1]),
        ];
        (model, xs, ys)
    }

    #[test]
    fn zeroed_weights_reduce_to_pred_plus_elbo() {
        let (model, xs, ys) = tiny_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noises = vec![model.draw_noise(&mut rng)];
        let weights = LossWeights {
            beta: 0.0,
            gamma: 0.0,
            ..LossWeights::default()
        };
        let (breakdown, _) = total_loss(
            &model,
            &xs,
            &ys,
            &noises,
            ProjectionPlan::None,
            &[],
            &weights,
            xs.len(),
        )
        .unwrap();
        assert_eq!(breakdown.ece, 0.0);
        assert_eq!(breakdown.constraint, 0.0);
        assert!(
            (breakdown.total - (breakdown.pred + weights.alpha * breakdown.elbo)).abs() < 1e-12
        );
    }

    #[test]
    fn component_additivity_under_weight_toggles() {
        let (model, xs, ys) = tiny_setup();
        let soft = [parse_constraint("soft(1.0): y[0] <= -10.0", 2, 2).unwrap()];
        let hard = [parse_constraint("hard: y[1] <= 0.05", 2, 2).unwrap()];
        let fs = FeasibleSet::build(&hard, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noises = vec![model.draw_noise(&mut rng), model.draw_noise(&mut rng)];
        let full = LossWeights::default();
        let run = |w: &LossWeights| {
            total_loss(
                &model,
                &xs,
                &ys,
                &noises,
                ProjectionPlan::Shared(&fs),
                &soft,
                w,
                10,
            )
            .unwrap()
        };
        let (b_full, _) = run(&full);
        assert!(b_full.constraint > 0.0, "soft violation should be charged");
        // Zeroing β removes exactly the ECE contribution.
        let (b_nobeta, _) = run(&LossWeights { beta: 0.0, ..full });
        assert!((b_full.total - b_nobeta.total - full.beta * b_full.ece).abs() < 1e-12);
        // Zeroing γ removes exactly the penalty contribution.
        let (b_nogamma, _) = run(&LossWeights { gamma: 0.0, ..full });
        assert!(
            (b_full.total - b_nogamma.total - full.gamma * b_full.constraint).abs() < 1e-12
        );
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        // Tiny model, fixed noise; hard bound chosen so the active set stays
        // stable under parameter perturbations.
        let (model, xs, ys) = tiny_setup();
        let soft = [parse_constraint("soft(2.0): y[0] <= -10.0", 2, 2).unwrap()];
        let hard = [parse_constraint("hard: y[1] <= 0.0", 2, 2).unwrap()];
        let fs = FeasibleSet::build(&hard, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noises = vec![model.draw_noise(&mut rng), model.draw_noise(&mut rng)];
        let weights = LossWeights::default();
        let loss_of = |m: &VariationalModel| {
            total_loss(
                m,
                &xs,
                &ys,
                &noises,
                ProjectionPlan::Shared(&fs),
                &soft,
                &weights,
                7,
            )
            .unwrap()
            .0
            .total
        };
        let (_, grads) = total_loss(
            &model,
            &xs,
            &ys,
            &noises,
            ProjectionPlan::Shared(&fs),
            &soft,
            &weights,
            7,
        )
        .unwrap();
        let analytic = grads.flatten();
        let base = model.flatten_params();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let mut m2 = model.clone();
            m2.set_params(&p);
            let lp = loss_of(&m2);
            p[i] -= 2.0 * h;
            m2.set_params(&p);
            let lm = loss_of(&m2);
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs()).max(1e-5);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }
}
