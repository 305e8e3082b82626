use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::SiteSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    #[default]
    Exponential,
}

impl KernelKind {
    /// Correlation at distance `d` for range `phi`.
    pub fn correlation(self, d: f64, phi: f64) -> f64 {
        match self {
            KernelKind::Exponential => (-d / phi).exp(),
        }
    }
}

/// Isotropic correlation function with range `phi` and optional nugget.
///
/// With nugget `nu`, off-diagonal entries are scaled by `1 - nu` so the
/// diagonal stays at one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationKernel {
    pub kind: KernelKind,
    pub range: f64,
    #[serde(default)]
    pub nugget: f64,
}

impl CorrelationKernel {
    pub fn exponential(range: f64) -> Result<Self> {
        Self::new(KernelKind::Exponential, range, 0.0)
    }

    pub fn new(kind: KernelKind, range: f64, nugget: f64) -> Result<Self> {
        if !(range > 0.0) || !range.is_finite() {
            return Err(Error::Domain(format!("range must be positive, got {range}")));
        }
        if !(0.0..1.0).contains(&nugget) {
            return Err(Error::Domain(format!("nugget must lie in [0, 1), got {nugget}")));
        }
        Ok(Self { kind, range, nugget })
    }

    pub fn with_range(&self, range: f64) -> Result<Self> {
        Self::new(self.kind, range, self.nugget)
    }

    #[inline]
    pub fn correlation(&self, d: f64) -> f64 {
        if d == 0.0 {
            1.0
        } else {
            self.between_distinct(d)
        }
    }

    /// Correlation between two distinct sites at distance `d` (the nugget
    /// applies even at `d = 0`).
    #[inline]
    pub fn between_distinct(&self, d: f64) -> f64 {
        (1.0 - self.nugget) * self.kind.correlation(d, self.range)
    }
}

/// Correlation matrix `R(phi)` over `sites`.
///
/// Coincident sites make `R` singular; without a nugget this is an error.
pub fn build_correlation(sites: &SiteSet, kernel: &CorrelationKernel) -> Result<DMatrix<f64>> {
    if kernel.nugget == 0.0 {
        if let Some((first, second)) = sites.first_duplicate() {
            return Err(Error::CoincidentSites { first, second });
        }
    }
    let n = sites.len();
    let mut r = DMatrix::zeros(n, n);
    for j in 0..n {
        r[(j, j)] = 1.0;
        for i in (j + 1)..n {
            let c = kernel.between_distinct(sites.distance(i, j));
            r[(i, j)] = c;
            r[(j, i)] = c;
        }
    }
    Ok(r)
}

/// Cross-correlation between two site sets (rows: `a`, columns: `b`).
///
/// Zero distance always maps to correlation one.
pub fn build_cross_correlation(a: &SiteSet, b: &SiteSet, kernel: &CorrelationKernel) -> DMatrix<f64> {
    a.cross_distances(b).map(|d| kernel.correlation(d))
}
