//! Gaussian linear autoregressive processes with Markov regime (AR-MR).
//!
//! The crate simulates AR-MR trajectories, evaluates their exact likelihood,
//! computes the Dirichlet / Normal-inverse-gamma prior mixture that controls
//! likelihood growth across state counts, fits parameters by EM and selects
//! the number of hidden states by penalized maximum likelihood.

// `!(x > 0.0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod io;
pub mod likelihood;
pub mod mixture;
pub mod model;
pub mod numeric;
pub mod quadrature;
pub mod seed;
pub mod selection;

pub use error::{Error, Result};
pub use model::{ModelSpec, ParameterBounds, RegimeParams, Trajectory, TransitionMatrix};
