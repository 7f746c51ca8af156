//! Training loop: Adam over the variational parameters of the composite
//! objective, with hard-constraint projection plans rebuilt on the
//! configured linearization cadence.

use anyhow::Result;
use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use canuf::bnn::{NoiseDraw, VariationalModel};
use canuf::calib::{total_loss, LossBreakdown, LossWeights, ProjectionPlan};
use canuf::csl::FeasibleSet;
use canuf::expr::{Constraint, ConstraintKind};

use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::error::HarnessError;
use crate::seeds::mix;

/// Adam with standard bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub pred: f64,
    pub elbo: f64,
    pub ece: f64,
    pub constraint: f64,
}

pub struct TrainOutcome {
    pub model: VariationalModel,
    pub log: Vec<EpochLog>,
    /// Number of per-sample projections performed during training.
    pub projection_events: usize,
}

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,total,pred,elbo,ece,constraint\n");
    for l in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.epoch, l.total, l.pred, l.elbo, l.ece, l.constraint
        ));
    }
    out
}

/// Effective loss weights after applying the ablation toggles.
pub fn effective_weights(cfg: &ExperimentConfig) -> LossWeights {
    LossWeights {
        alpha: cfg.loss.alpha,
        beta: if cfg.ablation.use_calibration_loss {
            cfg.loss.beta
        } else {
            0.0
        },
        gamma: cfg.loss.gamma,
        lambda: if cfg.ablation.use_adjustment {
            cfg.loss.lambda
        } else {
            0.0
        },
        tau_bin: cfg.loss.tau_bin,
    }
}

pub fn train_model(
    cfg: &ExperimentConfig,
    train: &Dataset,
    hard: &[Constraint],
    soft: &[Constraint],
    seed: u64,
) -> Result<TrainOutcome> {
    let d_x = train.d_x();
    let d_y = train.d_y();
    let mut model = VariationalModel::init(d_x, &cfg.model.hidden, d_y, cfg.model.prior_sigma, seed)
        .map_err(|e| HarnessError::Usage(e.to_string()))?;
    model.deterministic = !cfg.ablation.use_bayesian;

    let weights = effective_weights(cfg);
    let use_csl = cfg.ablation.use_csl && !hard.is_empty();
    let has_nonlinear = hard
        .iter()
        .any(|c| matches!(c.kind, ConstraintKind::NonlinearInequality { .. }));

    let xs: Vec<DVector<f64>> = train.xs.iter().map(|x| DVector::from_column_slice(x)).collect();
    let ys: Vec<DVector<f64>> = train.ys.iter().map(|y| DVector::from_column_slice(y)).collect();
    let n_total = xs.len();

    // Purely linear hard sets compile once; the anchor only matters for
    // linearization.
    let shared_set: Option<FeasibleSet> = if use_csl && !has_nonlinear {
        let anchor = vec![0.0; d_y];
        let x0 = vec![0.0; d_x];
        Some(
            FeasibleSet::build(hard, &anchor, &x0)
                .map_err(|e| HarnessError::Numerical(e.to_string()))?,
        )
    } else {
        None
    };
    // Per-sample linearization snapshots, refreshed on the cadence.
    let mut lin_cache: Vec<Option<FeasibleSet>> = vec![None; n_total];

    let mut adam = Adam::new(cfg.training.learning_rate, model.param_count());
    let mut log = Vec::with_capacity(cfg.training.epochs);
    let mut projection_events = 0usize;
    let mut iter = 0usize;

    for epoch in 0..cfg.training.epochs {
        let mut order: Vec<usize> = (0..n_total).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xE50C + epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut sums = LossBreakdown {
            total: 0.0,
            pred: 0.0,
            elbo: 0.0,
            ece: 0.0,
            constraint: 0.0,
        };
        let mut batches = 0usize;

        for chunk in order.chunks(cfg.training.batch_size) {
            let bx: Vec<DVector<f64>> = chunk.iter().map(|i| xs[*i].clone()).collect();
            let by: Vec<DVector<f64>> = chunk.iter().map(|i| ys[*i].clone()).collect();
            let mut noise_rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x7015E + iter as u64));
            let noises: Vec<NoiseDraw> = (0..cfg.training.n_mc_train.max(1))
                .map(|_| model.draw_noise(&mut noise_rng))
                .collect();

            // Assemble the projection plan for this batch.
            let per_sample_sets: Vec<FeasibleSet>;
            let plan = if !use_csl {
                ProjectionPlan::None
            } else if let Some(fs) = &shared_set {
                ProjectionPlan::Shared(fs)
            } else {
                let refresh = iter % cfg.training.relinearize_every.max(1) == 0;
                let mean_weights = model.mean_weights();
                let mut sets = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    if refresh || lin_cache[i].is_none() {
                        let (anchor, _) = mean_weights
                            .forward(&xs[i])
                            .map_err(|e| HarnessError::Numerical(e.to_string()))?;
                        let anchor: Vec<f64> = anchor.iter().copied().collect();
                        let fs = FeasibleSet::build(hard, &anchor, &train.xs[i])
                            .map_err(|e| HarnessError::Numerical(e.to_string()))?;
                        lin_cache[i] = Some(fs);
                    }
                    sets.push(lin_cache[i].clone().expect("cache filled above"));
                }
                per_sample_sets = sets;
                ProjectionPlan::PerSample(&per_sample_sets)
            };
            if !matches!(plan, ProjectionPlan::None) {
                projection_events += chunk.len() * noises.len();
            }

            let (breakdown, grads) =
                total_loss(&model, &bx, &by, &noises, plan, soft, &weights, n_total)
                    .map_err(|e| HarnessError::Numerical(e.to_string()))?;
            if !breakdown.total.is_finite() {
                return Err(HarnessError::Numerical(format!(
                    "loss became non-finite at epoch {epoch}, iteration {iter}"
                ))
                .into());
            }

            let mut params = model.flatten_params();
            adam.step(&mut params, &grads.flatten());
            model.set_params(&params);

            sums.total += breakdown.total;
            sums.pred += breakdown.pred;
            sums.elbo += breakdown.elbo;
            sums.ece += breakdown.ece;
            sums.constraint += breakdown.constraint;
            batches += 1;
            iter += 1;
        }

        let b = batches.max(1) as f64;
        log.push(EpochLog {
            epoch,
            total: sums.total / b,
            pred: sums.pred / b,
            elbo: sums.elbo / b,
            ece: sums.ece / b,
            constraint: sums.constraint / b,
        });
    }

    Ok(TrainOutcome {
        model,
        log,
        projection_events,
    })
}
