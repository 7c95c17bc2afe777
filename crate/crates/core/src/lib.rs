//! Numerical laboratory for the ensemble Kalman filter: exact Bayes filtering on grids,
//! the mean-field ensemble Kalman map, finite ensembles, and the metrics used to compare them.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod error;
pub mod linalg;
pub mod meanfield;
pub mod measures;
pub mod model;
pub mod particle;
pub mod rate;
pub mod rng;
pub mod truefilter;

mod json;
mod kernel;

pub use error::{Error, Result};
