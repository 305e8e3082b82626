//! Online filtering and sequential empirical Bayes estimation for latent
//! Gaussian autoregressive spatiotemporal processes observed through
//! exponential-family counts.
//!
//! The crate is organised bottom-up:
//!
//! * [`rng`] - keyed deterministic random streams.
//! * [`quad`] - Gauss quadrature rules and adaptive integration.
//! * [`covariates`] - design matrices `G_t`.
//! * [`spatial`] - sites, correlation kernels, Cholesky factorizations,
//!   multivariate normal densities, observation families and kriging.
//! * [`suffstats`] - fixed-size accumulators and conjugate Gibbs updates
//!   for the temporal parameters `(alpha, beta, sigma2)`.
//! * [`skewnormal`] - skew-normal distribution (Owen's T based CDF,
//!   quantiles, moment fitting).
//! * [`proposal`] - Laplace / skew-normal corrected importance proposals and
//!   the single-chain filtering step.
//! * [`eb`] - reverse logistic regression, mixture Bayes factors, range
//!   estimation and post-estimation reweighting.
//! * [`orchestrator`] - the chain population, the per-step barrier and
//!   checkpoints.
//! * [`mcmc`] - an offline MCMC smoother used as a validation baseline.
//! * [`sim`] - scenario generators, quadrature oracles and replication
//!   studies.
//! * [`io`] - configuration, CSV ingestion and result files.

pub mod covariates;
pub mod eb;
pub mod error;
pub mod io;
pub mod mcmc;
pub mod orchestrator;
pub mod proposal;
pub mod quad;
pub mod rng;
pub mod sim;
pub mod skewnormal;
pub mod spatial;
pub mod suffstats;

pub use error::{Error, Result};
