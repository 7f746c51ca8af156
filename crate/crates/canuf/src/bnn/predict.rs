//! Monte Carlo predictive distribution.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mix_seed, BnnError, VariationalModel};

/// Per-input predictive summary. The projection-related fields stay `None`
/// until the constraint layer and calibration stages fill them.
#[derive(Debug, Clone)]
pub struct PredictiveDistribution {
    /// μ*: Monte Carlo mean of the sampled network means.
    pub mean: Vec<f64>,
    /// (1/S) Σ (f_θ(s) − μ*)² per output dimension.
    pub epistemic: Vec<f64>,
    /// (1/S) Σ σ²_aleat(x, θ(s)) per output dimension.
    pub aleatoric: Vec<f64>,
    /// Elementwise epistemic + aleatoric.
    pub total: Vec<f64>,
    pub samples: usize,
    /// Feasible mean after projection.
    pub projected_mean: Option<Vec<f64>>,
    /// JΣJᵀ pushed through the projection Jacobian.
    pub propagated_covariance: Option<DMatrix<f64>>,
    /// σ̃²: total variance after infeasibility adjustment.
    pub adjusted_variance: Option<Vec<f64>>,
    /// ‖Π_C(ŷ) − ŷ‖².
    pub projection_distance_sq: Option<f64>,
}

impl PredictiveDistribution {
    /// Variance to quote for calibration: adjusted if present, else total.
    pub fn reported_variance(&self) -> &[f64] {
        self.adjusted_variance.as_deref().unwrap_or(&self.total)
    }

    /// Mean to quote: projected if present, else raw.
    pub fn reported_mean(&self) -> &[f64] {
        self.projected_mean.as_deref().unwrap_or(&self.mean)
    }
}

/// S-sample Monte Carlo prediction (paper default S = 50). Deterministic
/// given (model, x, S, seed); each sample uses an independent sub-stream so
/// results do not depend on evaluation order.
pub fn predict(
    model: &VariationalModel,
    x: &DVector<f64>,
    s: usize,
    seed: u64,
) -> Result<PredictiveDistribution, BnnError> {
    assert!(s >= 1, "at least one Monte Carlo sample required");
    let d = model.d_y;
    let mut means: Vec<DVector<f64>> = Vec::with_capacity(s);
    let mut aleat_sum = DVector::<f64>::zeros(d);
    for k in 0..s {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, k as u64));
        let weights = model.sample_weights(&mut rng);
        let (mean, logvar) = weights.forward(x)?;
        means.push(mean);
        for i in 0..d {
            aleat_sum[i] += logvar[i].exp();
        }
    }
    let mut mu = DVector::<f64>::zeros(d);
    for m in &means {
        mu += m;
    }
    mu /= s as f64;
    let mut epistemic = vec![0.0; d];
    for m in &means {
        for i in 0..d {
            let r = m[i] - mu[i];
            epistemic[i] += r * r;
        }
    }
    for e in &mut epistemic {
        *e /= s as f64;
    }
    let aleatoric: Vec<f64> = (0..d).map(|i| aleat_sum[i] / s as f64).collect();
    let total: Vec<f64> = epistemic
        .iter()
        .zip(&aleatoric)
        .map(|(e, a)| e + a)
        .collect();
    Ok(PredictiveDistribution {
        mean: mu.iter().copied().collect(),
        epistemic,
        aleatoric,
        total,
        samples: s,
        projected_mean: None,
        propagated_covariance: None,
        adjusted_variance: None,
        projection_distance_sq: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::softplus_inverse;

    #[test]
    fn deterministic_model_has_zero_epistemic_variance() {
        let mut model = VariationalModel::init(1, &[3], 1, 1.0, 4).unwrap();
        model.deterministic = true;
        let x = DVector::from_column_slice(&[0.5]);
        let pred = predict(&model, &x, 25, 7).unwrap();
        assert!(pred.epistemic.iter().all(|e| *e == 0.0));
        assert_eq!(pred.total, pred.aleatoric);
    }

    #[test]
    fn single_sample_has_zero_epistemic_by_formula() {
        let model = VariationalModel::init(1, &[3], 1, 1.0, 4).unwrap();
        let x = DVector::from_column_slice(&[0.5]);
        let pred = predict(&model, &x, 1, 7).unwrap();
        assert!(pred.epistemic.iter().all(|e| *e == 0.0));
    }

    #[test]
    fn decomposition_holds_exactly() {
        let model = VariationalModel::init(2, &[4], 2, 1.0, 9).unwrap();
        let x = DVector::from_column_slice(&[0.3, -0.8]);
        let pred = predict(&model, &x, 50, 3).unwrap();
        for i in 0..2 {
            assert_eq!(pred.total[i], pred.epistemic[i] + pred.aleatoric[i]);
        }
    }

    #[test]
    fn repeat_calls_are_identical() {
        let model = VariationalModel::init(2, &[4], 1, 1.0, 9).unwrap();
        let x = DVector::from_column_slice(&[0.3, -0.8]);
        let a = predict(&model, &x, 16, 5).unwrap();
        let b = predict(&model, &x, 16, 5).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn linear_model_epistemic_matches_analytic() {
        // Single linear factor without bias noise: f(x) = w·x with
        // w ~ N(μ, σ²) gives Var[f] = x²σ² exactly.
        let mut model = VariationalModel::init(1, &[], 1, 1.0, 2).unwrap();
        // Output head is 2 units (mean, logvar) over 1 input.
        let sigma_w = 0.3;
        model.layers[0].w_mean[(0, 0)] = 0.7;
        model.layers[0].w_raw.fill(softplus_inverse(sigma_w));
        // Freeze bias factors and the logvar row.
        model.layers[0].w_mean[(1, 0)] = 0.0;
        model.layers[0].w_raw[(1, 0)] = softplus_inverse(1e-12);
        model.layers[0].b_mean.fill(0.0);
        model.layers[0].b_raw.fill(softplus_inverse(1e-12));

        let xval = 1.7;
        let x = DVector::from_column_slice(&[xval]);
        let s = 10_000;
        let pred = predict(&model, &x, s, 123).unwrap();
        let analytic = xval * xval * sigma_w * sigma_w;
        // Sample variance of a Gaussian: sd ≈ analytic·√(2/S).
        let tol = 3.0 * analytic * (2.0 / s as f64).sqrt();
        assert!(
            (pred.epistemic[0] - analytic).abs() < tol,
            "epistemic {} vs analytic {analytic} (tol {tol})",
            pred.epistemic[0]
        );
    }
}
