use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::mvn::LN_2PI;
use crate::{Error, Result};

/// Exponential-family observation model `p(y | x) ∝ exp{y g(x) - tau b(x)}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `y ~ Poisson(tau * exp(x))`: `g(x) = x`, `b(x) = h(x) = exp(x)`.
    #[default]
    Poisson,
    /// `y ~ N(tau * x, tau)`: `g(x) = x`, `b(x) = x^2 / 2`, `h(x) = x`.
    /// Linear-Gaussian reference case; the Laplace proposal is exact.
    Gaussian,
}

impl Family {
    pub fn g(self, x: f64) -> f64 {
        x
    }

    pub fn b(self, x: f64) -> f64 {
        match self {
            Family::Poisson => x.exp(),
            Family::Gaussian => 0.5 * x * x,
        }
    }

    /// Inverse link (mean per unit exposure).
    pub fn h(self, x: f64) -> f64 {
        match self {
            Family::Poisson => x.exp(),
            Family::Gaussian => x,
        }
    }

    /// Full log-density including the normalizer.
    pub fn log_density(self, y: f64, tau: f64, x: f64) -> f64 {
        let kernel = y * self.g(x) - tau * self.b(x);
        match self {
            Family::Poisson => {
                let norm = if y == 0.0 { 0.0 } else { y * tau.ln() };
                kernel + norm - ln_gamma(y + 1.0)
            }
            Family::Gaussian => kernel - 0.5 * y * y / tau - 0.5 * (LN_2PI + tau.ln()),
        }
    }

    /// Value and first five derivatives in `x` of `-(y g(x) - tau b(x))`.
    pub fn neg_kernel_derivs(self, y: f64, tau: f64, x: f64) -> [f64; 6] {
        match self {
            Family::Poisson => {
                let e = tau * x.exp();
                [e - y * x, e - y, e, e, e, e]
            }
            Family::Gaussian => [0.5 * tau * x * x - y * x, tau * x - y, tau, 0.0, 0.0, 0.0],
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, tau: f64, x: f64, rng: &mut R) -> f64 {
        match self {
            Family::Poisson => {
                let lambda = tau * x.exp();
                if lambda <= 0.0 {
                    0.0
                } else if lambda > 1e15 {
                    lambda.round()
                } else {
                    Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(0.0)
                }
            }
            Family::Gaussian => Normal::new(tau * x, tau.sqrt()).unwrap().sample(rng),
        }
    }

    pub fn validate(self, y: f64) -> std::result::Result<(), String> {
        match self {
            Family::Poisson if !(y >= 0.0) => Err(format!("negative count {y}")),
            Family::Poisson if y.fract() != 0.0 => Err(format!("non-integral count {y}")),
            _ if !y.is_finite() => Err(format!("non-finite observation {y}")),
            _ => Ok(()),
        }
    }
}

/// Observations at one time step: values, exposures and a mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsBatch {
    pub y: Vec<f64>,
    pub tau: Vec<f64>,
    pub observed: Vec<bool>,
}

impl ObsBatch {
    pub fn full(y: Vec<f64>, tau: Vec<f64>) -> Self {
        let observed = vec![true; y.len()];
        Self { y, tau, observed }
    }

    /// No data at any of `n` sites.
    pub fn empty(n: usize) -> Self {
        Self {
            y: vec![0.0; n],
            tau: vec![1.0; n],
            observed: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    /// Restrict to the sites selected by `keep` (others become missing).
    pub fn masked_by(&self, keep: &[bool]) -> Self {
        let mut out = self.clone();
        for (o, &k) in out.observed.iter_mut().zip(keep) {
            *o = *o && k;
        }
        out
    }

    pub fn validate(&self, family: Family) -> Result<()> {
        if self.tau.len() != self.y.len() || self.observed.len() != self.y.len() {
            return Err(Error::Dimension("observation batch fields differ in length".into()));
        }
        for i in 0..self.y.len() {
            if !self.observed[i] {
                continue;
            }
            family
                .validate(self.y[i])
                .map_err(|m| Error::Domain(format!("site {i}: {m}")))?;
            if !(self.tau[i] > 0.0) {
                return Err(Error::Domain(format!(
                    "site {i}: exposure must be positive where observed, got {}",
                    self.tau[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ObservationModel {
    pub family: Family,
}

impl ObservationModel {
    pub fn new(family: Family) -> Self {
        Self { family }
    }

    pub fn poisson() -> Self {
        Self::new(Family::Poisson)
    }

    pub fn loglik(&self, batch: &ObsBatch, x: &DVector<f64>) -> Result<f64> {
        obs_loglik(batch, x, self)
    }
}

/// `sum_i [y_i g(x_i) - tau_i b(x_i) + normalizer]` over observed sites.
pub fn obs_loglik(batch: &ObsBatch, x: &DVector<f64>, model: &ObservationModel) -> Result<f64> {
    if batch.len() != x.len() {
        return Err(Error::Dimension(format!(
            "batch has {} sites, state has {}",
            batch.len(),
            x.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..x.len() {
        if !batch.observed[i] {
            continue;
        }
        let y = batch.y[i];
        if model.family == Family::Poisson && y < 0.0 {
            return Err(Error::Domain(format!("negative count {y} at site {i}")));
        }
        total += model.family.log_density(y, batch.tau[i], x[i]);
    }
    Ok(total)
}
