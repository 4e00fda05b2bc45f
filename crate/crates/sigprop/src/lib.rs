//! Signal propagation in deep transformers at initialization.
//!
//! Three pieces:
//!
//! * a theory engine that integrates covariance and averaged-partial-
//!   Jacobian-norm (APJN) recurrences layer by layer and evaluates their
//!   large-depth asymptotics,
//! * an empirical engine: a small from-scratch transformer with exact
//!   reverse-mode vector-Jacobian products and Hutchinson APJN estimation,
//! * a harness that validates the two against each other and maps
//!   critical/subcritical regimes.

pub mod error;
pub mod kernels;

pub use error::{Error, Result};
pub use kernels::{CovPair, Nonlinearity};
