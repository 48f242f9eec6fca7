// Full-precision literals are deliberate in the special-function
// coefficient tables, and `!(x > 0.0)` comparisons deliberately treat NaN
// as a failure.
#![allow(clippy::excessive_precision)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Empirical-likelihood inference on population quantiles for multiple
//! samples linked by a density ratio model.
//!
//! The crate fits the model by maximum empirical likelihood, profiles the
//! likelihood under quantile constraints through a dual saddle-point system,
//! calibrates the resulting likelihood-ratio statistic against chi-square,
//! and builds confidence regions. Wald and fully nonparametric comparators,
//! a Monte Carlo coverage harness, and a strategy registry over the three
//! region methods round out the library.

pub mod dist;
pub mod el;
pub mod elrt;
pub mod error;
pub mod method;
pub mod model;
pub mod rng;
pub mod sim;
pub mod solver;
pub mod wald_np;

pub use error::{Error, Result};
