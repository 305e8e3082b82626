//! Design matrices `G_t` built from site coordinates and the time index.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::spatial::SiteSet;
use crate::{Error, Result};

/// Columns of `G_t`, in order: intercept, distance from `reference`,
/// time index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateSpec {
    pub intercept: bool,
    pub distance_from: Option<[f64; 2]>,
    pub time_trend: bool,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        Self::intercept_only()
    }
}

impl CovariateSpec {
    pub fn intercept_only() -> Self {
        Self {
            intercept: true,
            distance_from: None,
            time_trend: false,
        }
    }

    /// Intercept, distance from `reference` and a linear time trend.
    pub fn distance_and_trend(reference: [f64; 2]) -> Self {
        Self {
            intercept: true,
            distance_from: Some(reference),
            time_trend: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.intercept as usize + self.distance_from.is_some() as usize + self.time_trend as usize
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.intercept {
            v.push("intercept".to_string());
        }
        if self.distance_from.is_some() {
            v.push("distance".to_string());
        }
        if self.time_trend {
            v.push("time".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::Config("the covariate spec has no columns".into()));
        }
        if let Some(r) = self.distance_from {
            if !r.iter().all(|v| v.is_finite()) {
                return Err(Error::Config("distance reference point must be finite".into()));
            }
        }
        Ok(())
    }

    /// `G_t` for `sites` at time `t`.
    pub fn design(&self, sites: &SiteSet, t: usize) -> DMatrix<f64> {
        let dist = self.distance_from.map(|r| sites.distances_to(r));
        DMatrix::from_fn(sites.len(), self.dim(), |i, j| {
            let mut c = j;
            if self.intercept {
                if c == 0 {
                    return 1.0;
                }
                c -= 1;
            }
            if let Some(d) = &dist {
                if c == 0 {
                    return d[i];
                }
            }
            t as f64
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_layout() {
        let sites = SiteSet::planar(vec![[0.0, 0.0], [3.0, 4.0]]);
        let g = CovariateSpec::distance_and_trend([0.0, 0.0]).design(&sites, 7);
        assert_eq!(g, DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 7.0, 1.0, 5.0, 7.0]));
        let g = CovariateSpec::intercept_only().design(&sites, 3);
        assert_eq!(g, DMatrix::from_element(2, 1, 1.0));
        let spec = CovariateSpec {
            intercept: false,
            distance_from: None,
            time_trend: true,
        };
        assert_eq!(spec.design(&sites, 2), DMatrix::from_element(2, 1, 2.0));
        assert!(CovariateSpec {
            intercept: false,
            distance_from: None,
            time_trend: false
        }
        .validate()
        .is_err());
    }
}
