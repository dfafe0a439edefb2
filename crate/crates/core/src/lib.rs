//! Generalized estimating equations for clustered data with stochastic
//! regressors: model primitives, working correlations, estimating functions,
//! a Newton solver, simulation and large-sample diagnostics.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]
// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(test)]
extern crate std;

mod error;

pub mod correlation;
pub mod diagnostics;
pub mod estimating;
pub mod linalg;
pub mod model;
pub mod simulation;
pub mod solver;

pub use error::{Error, Result};
