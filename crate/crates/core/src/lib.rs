//! Selection of the best policy under subpopulation fairness constraints.
//!
//! A policy `k` evaluated on subpopulation `l` yields noisy outcomes with mean
//! `mu[k][l]`. The goal is the policy with the largest population mean
//! `sum_l q_l mu[k][l]` among those that satisfy a fairness rule on every
//! subpopulation. This crate provides:
//!
//! - [`expfamily`]: KL divergences and per-coordinate minimizers for the
//!   Gaussian (known variance) and Bernoulli families.
//! - [`instance`]: the problem model, feasible sets and the instance class check.
//! - [`solvers`]: simplex projections and the constrained KL subproblem solvers.
//! - [`counterset`]: the inner minimization over alternative instances and its
//!   subgradient.
//! - [`weights`]: projected subgradient ascent for optimal sampling proportions
//!   and the complexity constant `T*`.
//! - [`engine`]: the sequential track-and-stop sampler with GLR stopping, plus
//!   policy-level and uniform baselines.
//! - [`env`]: sampling environments (parametric, bootstrap pools, cell means).
//! - [`harness`]: replication campaigns, aggregation and table output.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cells;
pub mod counterset;
pub mod engine;
pub mod env;
pub mod error;
pub mod expfamily;
pub mod fixtures;
pub mod harness;
pub mod instance;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod solvers;
pub mod weights;

pub use cells::CellMatrix;
pub use error::{Error, Result};
pub use expfamily::{FamilyKind, FamilySpec};
pub use instance::{FairnessSpec, Instance};
