//! Conformal prediction-based stochastic control for linear systems.
//!
//! The crate trains or synthesizes a feedback gain, calibrates prediction
//! regions for the closed-loop error with split conformal prediction, tightens
//! the constraints by those regions and solves the resulting deterministic
//! optimal control problem. A disturbance-feedback scenario program is
//! provided as a baseline, and a Monte Carlo harness validates the outcome.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use openblas_src as _;

pub mod conformal;
pub mod conic;
pub mod data;
pub mod direct;
pub mod error;
pub mod indirect;
pub mod linalg;
pub mod mvee;
pub mod relaxed;
pub mod rng;
pub mod scenario;
pub mod system;
pub mod validation;

pub use error::{Error, GridOutcome, GridPointStatus, Result};
pub use system::{ConstraintSpec, CostSpec, Ellipsoid, LinearSystem, Sequence, Trajectory};
