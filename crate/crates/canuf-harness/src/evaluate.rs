//! Evaluation pipeline: Monte Carlo prediction, feasible-set projection with
//! uncertainty propagation and infeasibility adjustment, metric assembly,
//! and the per-sample output file.

use anyhow::Result;
use nalgebra::{DMatrix, DVector};

use canuf::bnn::{predict, PredictiveDistribution, VariationalModel};
use canuf::calib::{bin_centers, calibration_report, CalibrationReport};
use canuf::csl::{project_with_relinearization, propagate_uncertainty, ProjectionResult};
use canuf::expr::Constraint;

use crate::dataset::Dataset;
use crate::error::HarnessError;
use crate::seeds::mix;

/// Reported variances are floored here: a fully constrained output dimension
/// has zero propagated variance, which the Gaussian metrics cannot accept.
const VAR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct EvaluationOutput {
    pub report: CalibrationReport,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub preds: Vec<PredictiveDistribution>,
    /// Projection results for samples that went through the layer.
    pub projections: Vec<Option<ProjectionResult>>,
}

pub struct EvalSettings {
    pub use_csl: bool,
    pub use_adjustment: bool,
    pub lambda: f64,
    pub mc_samples: usize,
    pub bins: usize,
    pub max_outer: usize,
}

pub fn evaluate_model(
    model: &VariationalModel,
    data: &Dataset,
    projection_constraints: &[Constraint],
    csr_constraints: &[Constraint],
    settings: &EvalSettings,
    seed: u64,
) -> Result<EvaluationOutput> {
    let mut preds = Vec::with_capacity(data.len());
    let mut projections = Vec::with_capacity(data.len());
    let use_csl = settings.use_csl && !projection_constraints.is_empty();

    for i in 0..data.len() {
        let x = DVector::from_column_slice(&data.xs[i]);
        let mut pred = predict(model, &x, settings.mc_samples, mix(seed, i as u64))
            .map_err(|e| HarnessError::Numerical(e.to_string()))?;
        if use_csl {
            let out = project_with_relinearization(
                projection_constraints,
                &pred.mean,
                &data.xs[i],
                settings.max_outer,
            )
            .map_err(|e| HarnessError::Numerical(e.to_string()))?;
            let res = out.result;
            let sigma = DMatrix::from_diagonal(&DVector::from_column_slice(&pred.total));
            let propagated = propagate_uncertainty(&res.jacobian, &sigma)
                .map_err(|e| HarnessError::Numerical(e.to_string()))?;
            let base: Vec<f64> = (0..pred.total.len()).map(|k| propagated[(k, k)]).collect();
            let adjusted: Vec<f64> = if settings.use_adjustment {
                base.iter()
                    .map(|v| (v + settings.lambda * res.squared_distance).max(VAR_FLOOR))
                    .collect()
            } else {
                base.iter().map(|v| v.max(VAR_FLOOR)).collect()
            };
            pred.projected_mean = Some(res.point.iter().copied().collect());
            pred.propagated_covariance = Some(propagated);
            pred.adjusted_variance = Some(adjusted);
            pred.projection_distance_sq = Some(res.squared_distance);
            projections.push(Some(res));
        } else {
            projections.push(None);
        }
        preds.push(pred);
    }

    let levels = bin_centers(settings.bins);
    let report = calibration_report(
        &preds,
        &data.ys,
        &data.xs,
        csr_constraints,
        settings.bins,
        &levels,
    )
    .map_err(|e| HarnessError::Numerical(e.to_string()))?;

    let (rmse, mae, r2) = regression_metrics(&preds, &data.ys);
    Ok(EvaluationOutput {
        report,
        rmse,
        mae,
        r2,
        preds,
        projections,
    })
}

pub fn regression_metrics(preds: &[PredictiveDistribution], ys: &[Vec<f64>]) -> (f64, f64, f64) {
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut count = 0usize;
    let mut mean_y = 0.0;
    for y in ys {
        for v in y {
            mean_y += v;
            count += 1;
        }
    }
    mean_y /= count as f64;
    let mut sst = 0.0;
    for (pred, y) in preds.iter().zip(ys) {
        let m = pred.reported_mean();
        for (k, v) in y.iter().enumerate() {
            let r = v - m[k];
            se += r * r;
            ae += r.abs();
            sst += (v - mean_y) * (v - mean_y);
        }
    }
    let rmse = (se / count as f64).sqrt();
    let mae = ae / count as f64;
    let r2 = if sst > 0.0 { 1.0 - se / sst } else { 0.0 };
    (rmse, mae, r2)
}

/// Per-sample CSV: raw and projected means, variance decomposition, adjusted
/// variance, squared projection distance, and the active constraint ids.
/// Floats use the shortest round-trip encoding, so independent recomputation
/// from this file reproduces the aggregates exactly.
pub fn per_sample_csv(
    data: &Dataset,
    preds: &[PredictiveDistribution],
    projections: &[Option<ProjectionResult>],
) -> String {
    let d_x = data.d_x();
    let d_y = data.d_y();
    let mut header = vec!["idx".to_string()];
    for j in 0..d_x {
        header.push(format!("x{j}"));
    }
    for k in 0..d_y {
        header.push(format!("y{k}"));
    }
    for k in 0..d_y {
        header.push(format!("raw{k}"));
    }
    for k in 0..d_y {
        header.push(format!("proj{k}"));
    }
    for k in 0..d_y {
        header.push(format!("epistemic{k}"));
    }
    for k in 0..d_y {
        header.push(format!("aleatoric{k}"));
    }
    for k in 0..d_y {
        header.push(format!("total{k}"));
    }
    for k in 0..d_y {
        header.push(format!("adjusted{k}"));
    }
    header.push("dist2".to_string());
    header.push("active".to_string());

    let mut out = header.join(",");
    out.push('\n');
    for (i, pred) in preds.iter().enumerate() {
        let mut row: Vec<String> = vec![i.to_string()];
        row.extend(data.xs[i].iter().map(f64::to_string));
        row.extend(data.ys[i].iter().map(f64::to_string));
        row.extend(pred.mean.iter().map(f64::to_string));
        let proj = pred.reported_mean();
        row.extend(proj.iter().map(|v| v.to_string()));
        row.extend(pred.epistemic.iter().map(f64::to_string));
        row.extend(pred.aleatoric.iter().map(f64::to_string));
        row.extend(pred.total.iter().map(f64::to_string));
        let adjusted = pred.reported_variance();
        row.extend(adjusted.iter().map(|v| v.to_string()));
        row.push(pred.projection_distance_sq.unwrap_or(0.0).to_string());
        let mut ids: Vec<&str> = projections[i]
            .as_ref()
            .map(|r| r.active.iter().map(|a| a.source_id.as_str()).collect())
            .unwrap_or_default();
        ids.sort_unstable();
        ids.dedup();
        row.push(ids.join(";"));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
