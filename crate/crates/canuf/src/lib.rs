//! Constraint-aware probabilistic regression.
//!
//! The pipeline combines a mean-field variational Bayesian MLP ([`bnn`]),
//! a differentiable Euclidean projection onto a constraint feasible set
//! ([`csl`]), constraint-guided calibration metrics and losses ([`calib`]),
//! automated rule extraction from structured knowledge records ([`extract`]),
//! a small constraint DSL with symbolic gradients ([`expr`]), and template
//! explanations for projected predictions ([`explain`]).

pub mod bnn;
pub mod calib;
pub mod csl;
pub mod explain;
pub mod expr;
pub mod extract;
