//! Prior-robustness engine for Bayesian posteriors and their variational
//! approximations.

// Negated comparisons are used so that NaN fails validation checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod densities;
pub mod error;
pub mod functional;
pub mod linear_response;
pub mod models;
pub mod oracle;
pub mod quadrature;
pub mod robustness;
pub mod sampling;
pub mod stats;
pub mod variational;

pub use error::{Error, Result};
