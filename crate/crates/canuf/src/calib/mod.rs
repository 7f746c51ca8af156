//! Constraint-guided calibration: hard calibration metrics, the
//! differentiable soft-binned ECE loss, infeasibility-aware variance
//! adjustment, and the composite training objective.
//!
//! Regression adapter: the ECE machinery is written over (confidence,
//! correctness) pairs. For Gaussian predictive distributions those pairs are
//! produced by [`coverage_events`]: one event per (sample, output dimension,
//! nominal coverage level), with confidence equal to the nominal central
//! interval mass and correctness the coverage indicator.

mod loss;
mod metrics;

pub use loss::{
    constraint_penalty, soft_ece_loss, total_loss, LossBreakdown, LossWeights, ProjectionPlan,
};
pub use metrics::{
    adjust_variance, calibration_report, coverage_events, ece, mce, nll, CalibrationBins,
    CalibrationReport, ReliabilityRow,
};

use thiserror::Error;

use crate::csl::CslError;
use crate::expr::EvalError;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("empty input")]
    EmptyInput,
    #[error("confidence and correctness vectors differ in length ({p} vs {r})")]
    LengthMismatch { p: usize, r: usize },
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("soft-binning temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("negative input: {0}")]
    NegativeInput(String),
    #[error("hard constraint `{id}` cannot enter the soft penalty")]
    HardConstraintInPenalty { id: String },
    #[error(transparent)]
    Projection(#[from] CslError),
    #[error(transparent)]
    Domain(#[from] EvalError),
}

/// Centers of M equal-width bins over [0,1]; these double as the default
/// coverage levels (M = 10 gives 0.05, 0.15, …, 0.95).
pub fn bin_centers(m: usize) -> Vec<f64> {
    (0..m).map(|i| (i as f64 + 0.5) / m as f64).collect()
}

/// Right-closed equal-width bin index (first bin closed on the left).
pub(crate) fn bin_index(p: f64, m: usize) -> usize {
    ((p * m as f64).ceil() as usize).saturating_sub(1).min(m - 1)
}
