//! Mean-field variational Bayesian MLP with a heteroscedastic output head.
//!
//! Every weight and bias carries a Gaussian factor N(μ, σ²) with
//! σ = softplus(ρ), trained by maximizing the evidence lower bound through
//! the reparameterization trick. The network predicts, for each target
//! dimension, a mean and a log aleatoric variance; Monte Carlo sampling over
//! the posterior yields the epistemic/aleatoric decomposition of the
//! predictive variance.
//!
//! Model parameters are mutated only by a training loop holding exclusive
//! access; prediction works on a read-only snapshot with per-sample noise
//! streams, so forward passes can run concurrently.

mod elbo;
mod forward;
mod predict;

pub use elbo::{elbo_loss, elbo_loss_seeded, heteroscedastic_nll, nll_cotangents};
pub use forward::{ForwardTape, GradientBuffer, LayerGrads, SampledWeights};
pub use predict::{predict, PredictiveDistribution};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// σ = softplus(ρ), stable in both tails.
pub fn softplus(rho: f64) -> f64 {
    if rho > 30.0 {
        rho
    } else {
        rho.exp().ln_1p()
    }
}

/// d softplus / d ρ.
pub fn sigmoid(rho: f64) -> f64 {
    if rho >= 0.0 {
        1.0 / (1.0 + (-rho).exp())
    } else {
        let e = rho.exp();
        e / (1.0 + e)
    }
}

/// ρ with softplus(ρ) = σ.
pub fn softplus_inverse(sigma: f64) -> f64 {
    if sigma > 30.0 {
        sigma
    } else {
        sigma.exp_m1().ln()
    }
}

/// One Gaussian posterior factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariationalParameter {
    pub mean: f64,
    pub raw_scale: f64,
}

impl VariationalParameter {
    pub fn sigma(&self) -> f64 {
        softplus(self.raw_scale)
    }
}

/// Variational parameters of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayer {
    pub w_mean: DMatrix<f64>,
    pub w_raw: DMatrix<f64>,
    pub b_mean: DVector<f64>,
    pub b_raw: DVector<f64>,
}

impl VariationalLayer {
    pub fn outputs(&self) -> usize {
        self.w_mean.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.w_mean.ncols()
    }
}

/// Gaussian noise draw (one ε per factor) kept separate from the model so a
/// fixed draw can be re-realized under perturbed parameters.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

#[derive(Debug, Error)]
pub enum BnnError {
    #[error("layer sizes must all be at least 1")]
    EmptyLayer,
    #[error("prior sigma must be positive, got {0}")]
    BadPrior(f64),
    #[error("input has dimension {got}, model expects {expected}")]
    InputDimension { expected: usize, got: usize },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mean-field Gaussian posterior over an MLP with ReLU hidden activations
/// and a `2·d_y` output head (means, then log aleatoric variances).
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalModel {
    /// Full size chain: input, hidden..., 2·d_y.
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<VariationalLayer>,
    pub prior_sigma: f64,
    pub d_y: usize,
    pub seed: u64,
    /// Collapse the posterior to its means: noise draws are zero and the KL
    /// term vanishes. Used by the no-Bayesian-backbone ablation.
    pub deterministic: bool,
}

impl VariationalModel {
    /// Fresh model: means drawn from N(0, 0.1²), scales set so that every
    /// σ_j = 0.1 exactly.
    pub fn init(
        d_x: usize,
        hidden: &[usize],
        d_y: usize,
        prior_sigma: f64,
        seed: u64,
    ) -> Result<Self, BnnError> {
        if d_x == 0 || d_y == 0 || hidden.iter().any(|h| *h == 0) {
            return Err(BnnError::EmptyLayer);
        }
        if !(prior_sigma > 0.0 && prior_sigma.is_finite()) {
            return Err(BnnError::BadPrior(prior_sigma));
        }
        let mut sizes = vec![d_x];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * d_y);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_normal = Normal::new(0.0, 0.1).unwrap();
        let raw = softplus_inverse(0.1);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                VariationalLayer {
                    w_mean: DMatrix::from_fn(n_out, n_in, |_, _| init_normal.sample(&mut rng)),
                    w_raw: DMatrix::from_element(n_out, n_in, raw),
                    b_mean: DVector::from_fn(n_out, |_, _| init_normal.sample(&mut rng)),
                    b_raw: DVector::from_element(n_out, raw),
                }
            })
            .collect();
        Ok(VariationalModel {
            layer_sizes: sizes,
            layers,
            prior_sigma,
            d_y,
            seed,
            deterministic: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Number of variational factors J (each carries a mean and a scale).
    pub fn factor_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w_mean.len() + l.b_mean.len())
            .sum()
    }

    /// Total trainable reals: 2 per factor.
    pub fn param_count(&self) -> usize {
        2 * self.factor_count()
    }

    /// ε ~ N(0, 1) per factor; zeros when the model is deterministic.
    pub fn draw_noise(&self, rng: &mut impl Rng) -> NoiseDraw {
        if self.deterministic {
            return self.zero_noise();
        }
        let std_normal = Normal::new(0.0, 1.0).unwrap();
        NoiseDraw {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        DMatrix::from_fn(l.w_mean.nrows(), l.w_mean.ncols(), |_, _| {
                            std_normal.sample(rng)
                        }),
                        DVector::from_fn(l.b_mean.len(), |_, _| std_normal.sample(rng)),
                    )
                })
                .collect(),
        }
    }

    pub fn zero_noise(&self) -> NoiseDraw {
        NoiseDraw {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    (
                        DMatrix::zeros(l.w_mean.nrows(), l.w_mean.ncols()),
                        DVector::zeros(l.b_mean.len()),
                    )
                })
                .collect(),
        }
    }

    /// θ = μ + softplus(ρ)·ε, retaining ε for reparameterized gradients.
    pub fn realize(&self, noise: &NoiseDraw) -> SampledWeights {
        let layers = self
            .layers
            .iter()
            .zip(&noise.layers)
            .map(|(l, (ew, eb))| {
                let w = DMatrix::from_fn(l.w_mean.nrows(), l.w_mean.ncols(), |r, c| {
                    l.w_mean[(r, c)] + softplus(l.w_raw[(r, c)]) * ew[(r, c)]
                });
                let b = DVector::from_fn(l.b_mean.len(), |r, _| {
                    l.b_mean[r] + softplus(l.b_raw[r]) * eb[r]
                });
                (w, b)
            })
            .collect();
        SampledWeights {
            layers,
            noise: noise.clone(),
            d_y: self.d_y,
        }
    }

    /// Convenience: draw and realize in one step.
    pub fn sample_weights(&self, rng: &mut impl Rng) -> SampledWeights {
        let noise = self.draw_noise(rng);
        self.realize(&noise)
    }

    /// Point weights at the posterior means.
    pub fn mean_weights(&self) -> SampledWeights {
        self.realize(&self.zero_noise())
    }

    /// Closed-form KL(q‖p) against the isotropic N(0, σ_p²) prior:
    /// Σ_j [ln(σ_p/σ_j) + (σ_j² + μ_j²)/(2σ_p²) − ½]. Zero for a
    /// deterministic model.
    pub fn kl_divergence(&self) -> f64 {
        if self.deterministic {
            return 0.0;
        }
        let sp = self.prior_sigma;
        let mut kl = 0.0;
        self.for_each_factor(|mean, raw| {
            let s = softplus(raw);
            kl += (sp / s).ln() + (s * s + mean * mean) / (2.0 * sp * sp) - 0.5;
        });
        kl
    }

    /// Accumulate `scale`·∂KL/∂φ into `grads`.
    pub fn kl_gradients(&self, scale: f64, grads: &mut GradientBuffer) {
        if self.deterministic {
            return;
        }
        let sp2 = self.prior_sigma * self.prior_sigma;
        for (l, g) in self.layers.iter().zip(&mut grads.layers) {
            for (idx, (m, r)) in l.w_mean.iter().zip(l.w_raw.iter()).enumerate() {
                let s = softplus(*r);
                g.w_mean[idx] += scale * m / sp2;
                g.w_raw[idx] += scale * (s / sp2 - 1.0 / s) * sigmoid(*r);
            }
            for (idx, (m, r)) in l.b_mean.iter().zip(l.b_raw.iter()).enumerate() {
                let s = softplus(*r);
                g.b_mean[idx] += scale * m / sp2;
                g.b_raw[idx] += scale * (s / sp2 - 1.0 / s) * sigmoid(*r);
            }
        }
    }

    fn for_each_factor(&self, mut f: impl FnMut(f64, f64)) {
        for l in &self.layers {
            for (m, r) in l.w_mean.iter().zip(l.w_raw.iter()) {
                f(*m, *r);
            }
            for (m, r) in l.b_mean.iter().zip(l.b_raw.iter()) {
                f(*m, *r);
            }
        }
    }

    pub fn zero_grads(&self) -> GradientBuffer {
        GradientBuffer {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    w_mean: DMatrix::zeros(l.w_mean.nrows(), l.w_mean.ncols()),
                    w_raw: DMatrix::zeros(l.w_raw.nrows(), l.w_raw.ncols()),
                    b_mean: DVector::zeros(l.b_mean.len()),
                    b_raw: DVector::zeros(l.b_raw.len()),
                })
                .collect(),
        }
    }

    /// Flatten all trainable reals in a fixed order (per layer: w_mean,
    /// w_raw, b_mean, b_raw; matrices column-major).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w_mean.iter());
            out.extend(l.w_raw.iter());
            out.extend(l.b_mean.iter());
            out.extend(l.b_raw.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for l in &mut self.layers {
            for v in l.w_mean.iter_mut() {
                *v = *it.next().expect("flat parameter vector too short");
            }
            for v in l.w_raw.iter_mut() {
                *v = *it.next().expect("flat parameter vector too short");
            }
            for v in l.b_mean.iter_mut() {
                *v = *it.next().expect("flat parameter vector too short");
            }
            for v in l.b_raw.iter_mut() {
                *v = *it.next().expect("flat parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), BnnError> {
        let file = CheckpointFile::from_model(self);
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| BnnError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, BnnError> {
        let text = std::fs::read_to_string(path)?;
        let file: CheckpointFile =
            serde_json::from_str(&text).map_err(|e| BnnError::Checkpoint(e.to_string()))?;
        file.into_model()
    }
}

/// Stable on-disk model format (JSON, versioned).
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    layer_sizes: Vec<usize>,
    d_y: usize,
    prior_sigma: f64,
    seed: u64,
    deterministic: bool,
    /// Per layer: column-major w_mean, w_raw, then b_mean, b_raw.
    layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointLayer {
    rows: usize,
    cols: usize,
    w_mean: Vec<f64>,
    w_raw: Vec<f64>,
    b_mean: Vec<f64>,
    b_raw: Vec<f64>,
}

impl CheckpointFile {
    fn from_model(m: &VariationalModel) -> Self {
        CheckpointFile {
            version: 1,
            layer_sizes: m.layer_sizes.clone(),
            d_y: m.d_y,
            prior_sigma: m.prior_sigma,
            seed: m.seed,
            deterministic: m.deterministic,
            layers: m
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    rows: l.w_mean.nrows(),
                    cols: l.w_mean.ncols(),
                    w_mean: l.w_mean.iter().copied().collect(),
                    w_raw: l.w_raw.iter().copied().collect(),
                    b_mean: l.b_mean.iter().copied().collect(),
                    b_raw: l.b_raw.iter().copied().collect(),
                })
                .collect(),
        }
    }

    fn into_model(self) -> Result<VariationalModel, BnnError> {
        if self.version != 1 {
            return Err(BnnError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if l.w_mean.len() != l.rows * l.cols
                    || l.w_raw.len() != l.rows * l.cols
                    || l.b_mean.len() != l.rows
                    || l.b_raw.len() != l.rows
                {
                    return Err(BnnError::Checkpoint("layer shape mismatch".to_string()));
                }
                Ok(VariationalLayer {
                    w_mean: DMatrix::from_column_slice(l.rows, l.cols, &l.w_mean),
                    w_raw: DMatrix::from_column_slice(l.rows, l.cols, &l.w_raw),
                    b_mean: DVector::from_column_slice(&l.b_mean),
                    b_raw: DVector::from_column_slice(&l.b_raw),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(VariationalModel {
            layer_sizes: self.layer_sizes,
            layers,
            prior_sigma: self.prior_sigma,
            d_y: self.d_y,
            seed: self.seed,
            deterministic: self.deterministic,
        })
    }
}

/// SplitMix64 step, used to derive independent per-sample seeds.
pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = VariationalModel::init(2, &[8, 8], 1, 1.0, 42).unwrap();
        let b = VariationalModel::init(2, &[8, 8], 1, 1.0, 42).unwrap();
        assert_eq!(a, b);
        let c = VariationalModel::init(2, &[8, 8], 1, 1.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_scales_are_exactly_one_tenth() {
        let m = VariationalModel::init(3, &[4], 2, 1.0, 0).unwrap();
        m.for_each_factor(|_, raw| {
            assert!((softplus(raw) - 0.1).abs() < 1e-12);
        });
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let m = VariationalModel::init(2, &[256, 256, 256, 256], 2, 1.0, 0).unwrap();
        // Factors: Σ (in·out + out) over consecutive-size pairs.
        let sizes = [2, 256, 256, 256, 256, 4];
        let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(m.factor_count(), expected);
        assert_eq!(m.param_count(), 2 * expected);
        assert_eq!(m.flatten_params().len(), m.param_count());
    }

    #[test]
    fn kl_zero_iff_posterior_equals_prior() {
        let mut m = VariationalModel::init(1, &[1], 1, 1.0, 0).unwrap();
        // Force every factor to N(0, 1) = prior.
        let raw = softplus_inverse(1.0);
        for l in &mut m.layers {
            l.w_mean.fill(0.0);
            l.b_mean.fill(0.0);
            l.w_raw.fill(raw);
            l.b_raw.fill(raw);
        }
        assert!(m.kl_divergence().abs() < 1e-12);
        // Shift one mean to 1: closed form gives exactly 1/2 for that factor.
        m.layers[0].w_mean[(0, 0)] = 1.0;
        assert!((m.kl_divergence() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_on_random_models() {
        for seed in 0..20 {
            let m = VariationalModel::init(2, &[5], 2, 0.7, seed).unwrap();
            assert!(m.kl_divergence() >= 0.0);
        }
    }

    #[test]
    fn zero_noise_realizes_the_means() {
        let m = VariationalModel::init(2, &[3], 1, 1.0, 5).unwrap();
        let w = m.mean_weights();
        assert_eq!(w.layers[0].0, m.layers[0].w_mean);
        assert_eq!(w.layers[1].1, m.layers[1].b_mean);
    }

    #[test]
    fn sample_moments_match_posterior() {
        use rand::SeedableRng;
        let m = VariationalModel::init(1, &[1], 1, 1.0, 9).unwrap();
        let mu = m.layers[0].w_mean[(0, 0)];
        let sigma = softplus(m.layers[0].w_raw[(0, 0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| m.sample_weights(&mut rng).layers[0].0[(0, 0)])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        // 4 standard errors.
        let se_mean = sigma / (n as f64).sqrt();
        assert!((mean - mu).abs() < 4.0 * se_mean, "mean {mean} vs {mu}");
        let se_var = sigma * sigma * (2.0 / n as f64).sqrt();
        assert!(
            (var - sigma * sigma).abs() < 4.0 * se_var,
            "var {var} vs {}",
            sigma * sigma
        );
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("canuf-bnn-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        let m = VariationalModel::init(3, &[4, 4], 2, 0.5, 77).unwrap();
        m.save_checkpoint(&path).unwrap();
        let back = VariationalModel::load_checkpoint(&path).unwrap();
        assert_eq!(m, back);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let m = VariationalModel::init(2, &[3], 1, 0.8, 3).unwrap();
        let mut grads = m.zero_grads();
        m.kl_gradients(1.0, &mut grads);
        let analytic = grads.flatten();
        let base = m.flatten_params();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut plus = m.clone();
            let mut minus = m.clone();
            let mut p = base.clone();
            p[i] += h;
            plus.set_params(&p);
            p[i] -= 2.0 * h;
            minus.set_params(&p);
            let fd = (plus.kl_divergence() - minus.kl_divergence()) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() < 1e-5 * analytic[i].abs().max(1.0),
                "param {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }
}
