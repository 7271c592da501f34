//! Latent low-rank factor models for multivariate spatial-temporal data.
//!
//! Observations `y_t(s) ∈ R^p` on `n` sites and `T` regular time points are
//! modeled as a noisy low-rank signal `Ξ_t = Q_A Z_t Q_B'` plus a spatially
//! white nugget. The crate estimates the spatial and variable loading spaces
//! from partitioned covariance aggregates, approximates the spatial loading
//! functions on a tensor-product sieve, and predicts over space (kriging at
//! new sites) and time (VAR/MAR factor dynamics).
//!
//! Start with [`simgen::generate`] for synthetic data, [`factor::fit`] for
//! estimation, and the `examples/` directory for end-to-end walkthroughs.

pub mod dataset;
pub mod error;
pub mod factor;
pub mod forecast;
pub mod linalg;
pub mod metrics;
pub mod replicate;
pub mod sieve;
pub mod simgen;

pub use error::{Error, Result};
