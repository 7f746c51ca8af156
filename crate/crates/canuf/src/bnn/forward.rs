//! Forward pass, activation tape, and manual backpropagation for sampled
//! weights, including the reparameterization chain back to (μ, ρ).

use nalgebra::{DMatrix, DVector};

use super::{sigmoid, BnnError, NoiseDraw, VariationalModel};

/// Log aleatoric variances are clamped to this band for numerical safety;
/// gradients are masked outside it.
pub(crate) const LOG_VAR_CLAMP: f64 = 20.0;

/// Point weights θ^(s) drawn from the posterior, with the generating noise
/// retained so gradients can flow back through θ = μ + σ(ρ)·ε.
#[derive(Debug, Clone)]
pub struct SampledWeights {
    /// Per layer: (weight matrix, bias).
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
    pub(crate) noise: NoiseDraw,
    pub(crate) d_y: usize,
}

/// Activations recorded by a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Layer inputs: x, h₁, …, h_{L−1}.
    inputs: Vec<DVector<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<DVector<f64>>,
}

/// Per-layer gradient accumulator aligned with `VariationalModel`.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w_mean: DMatrix<f64>,
    pub w_raw: DMatrix<f64>,
    pub b_mean: DVector<f64>,
    pub b_raw: DVector<f64>,
}

impl GradientBuffer {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w_mean.iter());
            out.extend(l.w_raw.iter());
            out.extend(l.b_mean.iter());
            out.extend(l.b_raw.iter());
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.w_mean.scale_mut(factor);
            l.w_raw.scale_mut(factor);
            l.b_mean.scale_mut(factor);
            l.b_raw.scale_mut(factor);
        }
    }

    pub fn add(&mut self, other: &GradientBuffer) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w_mean += &b.w_mean;
            a.w_raw += &b.w_raw;
            a.b_mean += &b.b_mean;
            a.b_raw += &b.b_raw;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.flatten().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl SampledWeights {
    pub fn output_dim(&self) -> usize {
        self.d_y
    }

    /// Deterministic forward pass: ReLU hidden layers, linear head split
    /// into (mean, log aleatoric variance).
    pub fn forward(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), BnnError> {
        let (mean, logvar, _) = self.forward_tape(x)?;
        Ok((mean, logvar))
    }

    pub fn forward_tape(
        &self,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, ForwardTape), BnnError> {
        let expected = self.layers[0].0.ncols();
        if x.len() != expected {
            return Err(BnnError::InputDimension {
                expected,
                got: x.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, (w, b)) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            let z = w * &h + b;
            pre.push(z.clone());
            h = if k < last { z.map(relu) } else { z };
        }
        let mean = h.rows(0, self.d_y).into_owned();
        let logvar = h
            .rows(self.d_y, self.d_y)
            .map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP));
        Ok((mean, logvar, ForwardTape { inputs, pre }))
    }

    /// Backpropagate output cotangents (∂L/∂mean, ∂L/∂logvar) through the
    /// network and the reparameterization, accumulating ∂L/∂(μ, ρ) into
    /// `grads`. Also returns ∂L/∂x for callers that need input sensitivities.
    pub fn backward(
        &self,
        model: &VariationalModel,
        tape: &ForwardTape,
        d_mean: &DVector<f64>,
        d_logvar: &DVector<f64>,
        grads: &mut GradientBuffer,
    ) -> DVector<f64> {
        let last = self.layers.len() - 1;
        // Head cotangent with the clamp mask on the logvar half.
        let head = &self.layers[last].0;
        let mut delta = DVector::zeros(head.nrows());
        for i in 0..self.d_y {
            delta[i] = d_mean[i];
            let z = tape.pre[last][self.d_y + i];
            delta[self.d_y + i] = if z.abs() < LOG_VAR_CLAMP {
                d_logvar[i]
            } else {
                0.0
            };
        }

        for k in (0..self.layers.len()).rev() {
            let (w, _) = &self.layers[k];
            let input = &tape.inputs[k];
            // dθ for this layer, then the reparameterization chain:
            // dμ += dθ, dρ += dθ·ε·softplus′(ρ).
            let dw = &delta * input.transpose();
            let db = &delta;
            let g = &mut grads.layers[k];
            let ml = &model.layers[k];
            let (ew, eb) = &self.noise.layers[k];
            for (idx, v) in dw.iter().enumerate() {
                g.w_mean[idx] += v;
                g.w_raw[idx] += v * ew[idx] * sigmoid(ml.w_raw[idx]);
            }
            for (idx, v) in db.iter().enumerate() {
                g.b_mean[idx] += v;
                g.b_raw[idx] += v * eb[idx] * sigmoid(ml.b_raw[idx]);
            }
            if k == 0 {
                return w.transpose() * &delta;
            }
            let mut upstream = w.transpose() * &delta;
            // ReLU mask of the previous layer.
            for (u, z) in upstream.iter_mut().zip(tape.pre[k - 1].iter()) {
                if *z <= 0.0 {
                    *u = 0.0;
                }
            }
            delta = upstream;
        }
        unreachable!("loop returns at k == 0");
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}
