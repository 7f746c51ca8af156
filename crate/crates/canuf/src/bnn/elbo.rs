//! Evidence lower bound as a minimization loss with reparameterized
//! gradients.
//!
//! For a mini-batch B out of N training points,
//!
//! ```text
//!     loss = (N/|B|) · (1/S) Σ_s Σ_{i∈B} nll(y_i; f_{θ(s)}(x_i)) + KL(q‖p)
//! ```
//!
//! with the heteroscedastic Gaussian negative log-likelihood
//! ½[(y−ŷ)²/σ² + log σ²] summed over output dimensions. The likelihood term
//! is scaled so the mini-batch objective stays an unbiased ELBO estimate
//! with the full KL charged once.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GradientBuffer, NoiseDraw, VariationalModel};

/// ½[(y−ŷ)²/σ² + log σ²] per element, summed over dimensions.
pub fn heteroscedastic_nll(y: &DVector<f64>, mean: &DVector<f64>, logvar: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for i in 0..y.len() {
        let var = logvar[i].exp();
        let r = y[i] - mean[i];
        acc += 0.5 * (r * r / var + logvar[i]);
    }
    acc
}

/// Cotangents of `heteroscedastic_nll` w.r.t. the network outputs:
/// (∂/∂mean, ∂/∂logvar).
pub fn nll_cotangents(
    y: &DVector<f64>,
    mean: &DVector<f64>,
    logvar: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let d = y.len();
    let mut d_mean = DVector::zeros(d);
    let mut d_logvar = DVector::zeros(d);
    for i in 0..d {
        let var = logvar[i].exp();
        let r = y[i] - mean[i];
        d_mean[i] = -r / var;
        d_logvar[i] = 0.5 * (1.0 - r * r / var);
    }
    (d_mean, d_logvar)
}

/// ELBO loss and its gradients w.r.t. every variational parameter, under the
/// supplied noise draws (one per Monte Carlo sample). `n_total` is the
/// dataset size N.
pub fn elbo_loss(
    model: &VariationalModel,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    noises: &[NoiseDraw],
    n_total: usize,
) -> (f64, GradientBuffer) {
    assert_eq!(xs.len(), ys.len(), "batch features/targets length mismatch");
    assert!(!xs.is_empty(), "batch must be nonempty");
    assert!(!noises.is_empty(), "at least one Monte Carlo draw required");

    let batch = xs.len() as f64;
    let scale = n_total as f64 / batch / noises.len() as f64;
    let mut grads = model.zero_grads();
    let mut likelihood = 0.0;
    for noise in noises {
        let weights = model.realize(noise);
        for (x, y) in xs.iter().zip(ys) {
            let (mean, logvar, tape) = weights
                .forward_tape(x)
                .expect("batch dimensions validated by caller");
            likelihood += heteroscedastic_nll(y, &mean, &logvar);
            let (mut d_mean, mut d_logvar) = nll_cotangents(y, &mean, &logvar);
            d_mean.scale_mut(scale);
            d_logvar.scale_mut(scale);
            weights.backward(model, &tape, &d_mean, &d_logvar, &mut grads);
        }
    }
    let kl = model.kl_divergence();
    model.kl_gradients(1.0, &mut grads);
    (scale * likelihood + kl, grads)
}

/// `elbo_loss` with noise drawn from a seeded stream.
pub fn elbo_loss_seeded(
    model: &VariationalModel,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    n_mc: usize,
    n_total: usize,
    seed: u64,
) -> (f64, GradientBuffer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noises: Vec<NoiseDraw> = (0..n_mc.max(1)).map(|_| model.draw_noise(&mut rng)).collect();
    elbo_loss(model, xs, ys, &noises, n_total)
}
