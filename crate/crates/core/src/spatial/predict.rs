use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{build_correlation, build_cross_correlation, CorrelationKernel, GaussianFactorization, SiteSet};
use crate::{Error, Result};

/// Precomputed simple-kriging operator from monitored to target sites for a
/// fixed range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Kriging {
    /// `R21 R11^{-1}`, one row per target.
    weights: DMatrix<f64>,
    /// `R22 - R21 R11^{-1} R12` (unit scale).
    cond_corr: DMatrix<f64>,
    /// Lower factor of `cond_corr` allowing zero pivots.
    cond_lower: DMatrix<f64>,
}

/// Conditional Gaussian for the target sites.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPrediction {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl ConditionalPrediction {
    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }
}

/// Cholesky for positive semidefinite matrices: pivots below `tol` become
/// zero columns.
fn psd_lower(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol {
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    l
}

impl Kriging {
    pub fn new(monitored: &SiteSet, targets: &SiteSet, kernel: &CorrelationKernel) -> Result<Self> {
        let r11 = build_correlation(monitored, kernel)?;
        let fac = GaussianFactorization::new(&r11)?;
        let r12 = build_cross_correlation(monitored, targets, kernel);
        let mut r22 = DMatrix::zeros(targets.len(), targets.len());
        for j in 0..targets.len() {
            for i in 0..targets.len() {
                r22[(i, j)] = kernel.correlation(targets.distance(i, j));
            }
        }
        let solved = fac.solve_matrix(&r12);
        let mut weights = solved.transpose();
        let mut cond_corr = r22 - r12.transpose() * &solved;
        cond_corr = (&cond_corr + cond_corr.transpose()) * 0.5;

        // Targets sitting on a monitored site copy it exactly.
        let dist = targets.cross_distances(monitored);
        for t in 0..targets.len() {
            if let Some(m) = (0..monitored.len()).find(|&m| dist[(t, m)] == 0.0) {
                weights.row_mut(t).fill(0.0);
                weights[(t, m)] = 1.0;
                cond_corr.row_mut(t).fill(0.0);
                cond_corr.column_mut(t).fill(0.0);
            }
        }
        for i in 0..targets.len() {
            if cond_corr[(i, i)] < 0.0 {
                cond_corr[(i, i)] = 0.0;
            }
        }
        let cond_lower = psd_lower(&cond_corr, 1e-12);
        Ok(Self {
            weights,
            cond_corr,
            cond_lower,
        })
    }

    pub fn n_targets(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Conditional law given the monitored field `x`, the means implied by
    /// the covariates at both site sets and the marginal variance scale.
    pub fn condition(
        &self,
        x: &DVector<f64>,
        mean_monitored: &DVector<f64>,
        mean_targets: &DVector<f64>,
        variance_scale: f64,
    ) -> Result<ConditionalPrediction> {
        if x.len() != self.weights.ncols() || mean_monitored.len() != x.len() {
            return Err(Error::Dimension(format!(
                "monitored field has {} entries, kriging expects {}",
                x.len(),
                self.weights.ncols()
            )));
        }
        if mean_targets.len() != self.n_targets() {
            return Err(Error::Dimension(format!(
                "target mean has {} entries, kriging expects {}",
                mean_targets.len(),
                self.n_targets()
            )));
        }
        if !(variance_scale >= 0.0) {
            return Err(Error::Domain(format!("variance scale must be nonnegative, got {variance_scale}")));
        }
        Ok(ConditionalPrediction {
            mean: mean_targets + &self.weights * (x - mean_monitored),
            cov: &self.cond_corr * variance_scale,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, pred: &ConditionalPrediction, variance_scale: f64, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.n_targets(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &pred.mean + &self.cond_lower * z * variance_scale.sqrt()
    }
}

/// Kriging restricted to per-target means and variances, for large target
/// sets where the joint conditional covariance is not needed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginalKriging {
    weights: DMatrix<f64>,
    cond_var: DVector<f64>,
}

impl MarginalKriging {
    pub fn new(monitored: &SiteSet, targets: &SiteSet, kernel: &CorrelationKernel) -> Result<Self> {
        let r11 = build_correlation(monitored, kernel)?;
        let fac = GaussianFactorization::new(&r11)?;
        let r12 = build_cross_correlation(monitored, targets, kernel);
        let solved = fac.solve_matrix(&r12);
        let mut weights = solved.transpose();
        let mut cond_var = DVector::from_fn(targets.len(), |t, _| {
            (1.0 - r12.column(t).dot(&solved.column(t))).max(0.0)
        });
        let dist = targets.cross_distances(monitored);
        for t in 0..targets.len() {
            if let Some(m) = (0..monitored.len()).find(|&m| dist[(t, m)] == 0.0) {
                weights.row_mut(t).fill(0.0);
                weights[(t, m)] = 1.0;
                cond_var[t] = 0.0;
            }
        }
        Ok(Self { weights, cond_var })
    }

    pub fn n_targets(&self) -> usize {
        self.weights.nrows()
    }

    /// Conditional means and variances at the targets.
    pub fn condition(
        &self,
        x: &DVector<f64>,
        mean_monitored: &DVector<f64>,
        mean_targets: &DVector<f64>,
        variance_scale: f64,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.len() != self.weights.ncols() || mean_monitored.len() != x.len() || mean_targets.len() != self.n_targets() {
            return Err(Error::Dimension("kriging input sizes do not match the site sets".into()));
        }
        if !(variance_scale >= 0.0) {
            return Err(Error::Domain(format!("variance scale must be nonnegative, got {variance_scale}")));
        }
        Ok((mean_targets + &self.weights * (x - mean_monitored), &self.cond_var * variance_scale))
    }
}

/// One draw of the latent field at the target sites given the monitored
/// field.
pub fn predict_unmonitored<R: Rng + ?Sized>(
    x: &DVector<f64>,
    mean_monitored: &DVector<f64>,
    mean_targets: &DVector<f64>,
    variance_scale: f64,
    kriging: &Kriging,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let pred = kriging.condition(x, mean_monitored, mean_targets, variance_scale)?;
    Ok(kriging.sample(&pred, variance_scale, rng))
}
