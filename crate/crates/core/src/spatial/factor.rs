use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{build_correlation, CorrelationKernel, SiteSet};
use crate::{Error, Result};

/// Cholesky factor `L` (lower) of a symmetric positive definite matrix,
/// with its log-determinant.
///
/// All solves go through triangular substitutions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianFactorization {
    lower: DMatrix<f64>,
    log_det: f64,
}

/// Lower Cholesky factor. Reads only the lower triangle of `a`.
/// Failing pivots are reported 1-based.
pub(crate) fn cholesky_lower(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Dimension(format!("cholesky of a {}x{} matrix", n, a.ncols())));
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j + 1 });
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
    Ok(l)
}

/// Solve `L x = b` in place for lower-triangular `L`.
pub(crate) fn forward_in_place(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    let data = l.as_slice();
    for j in 0..n {
        let col = &data[j * n..(j + 1) * n];
        let bj = b[j] / col[j];
        b[j] = bj;
        if bj != 0.0 {
            for i in (j + 1)..n {
                b[i] -= col[i] * bj;
            }
        }
    }
}

/// Solve `L' x = b` in place for lower-triangular `L`.
pub(crate) fn backward_in_place(l: &DMatrix<f64>, b: &mut [f64]) {
    let n = l.nrows();
    let data = l.as_slice();
    for j in (0..n).rev() {
        let col = &data[j * n..(j + 1) * n];
        let mut s = b[j];
        for i in (j + 1)..n {
            s -= col[i] * b[i];
        }
        b[j] = s / col[j];
    }
}

impl GaussianFactorization {
    pub fn new(r: &DMatrix<f64>) -> Result<Self> {
        let lower = cholesky_lower(r)?;
        let log_det = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::Numerical("log-determinant is not finite".into()));
        }
        Ok(Self { lower, log_det })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            lower: DMatrix::identity(n, n),
            log_det: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `L^{-1} b`.
    pub fn whiten(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        forward_in_place(&self.lower, out.as_mut_slice());
        out
    }

    /// `L^{-1} B`, column by column.
    pub fn whiten_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        let n = self.dim();
        for col in out.as_mut_slice().chunks_mut(n) {
            forward_in_place(&self.lower, col);
        }
        out
    }

    /// `L z`.
    pub fn color(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        let data = self.lower.as_slice();
        let mut out = DVector::zeros(n);
        for j in 0..n {
            let zj = z[j];
            if zj != 0.0 {
                let col = &data[j * n..(j + 1) * n];
                for i in j..n {
                    out[i] += col[i] * zj;
                }
            }
        }
        out
    }

    /// `R^{-1} b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        forward_in_place(&self.lower, out.as_mut_slice());
        backward_in_place(&self.lower, out.as_mut_slice());
        out
    }

    /// `R^{-1} B`.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        let n = self.dim();
        for col in out.as_mut_slice().chunks_mut(n) {
            forward_in_place(&self.lower, col);
            backward_in_place(&self.lower, col);
        }
        out
    }

    /// `v' R^{-1} v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm_squared()
    }

    /// Reconstructs `L L'`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }

    /// Heap bytes held by the factor.
    pub fn heap_bytes(&self) -> usize {
        self.lower.len() * std::mem::size_of::<f64>()
    }
}

/// Factorization of `R(phi)` tagged with its range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RangeFactor {
    pub phi: f64,
    pub fac: GaussianFactorization,
}

impl RangeFactor {
    pub fn build(sites: &SiteSet, kernel: &CorrelationKernel) -> Result<Self> {
        let r = build_correlation(sites, kernel)?;
        Ok(Self {
            phi: kernel.range,
            fac: GaussianFactorization::new(&r)?,
        })
    }

    /// Factors for every range in `phis`, sharing the kernel's kind and nugget.
    pub fn grid(sites: &SiteSet, kernel: &CorrelationKernel, phis: &[f64]) -> Result<Vec<Self>> {
        phis.iter()
            .map(|&phi| Self::build(sites, &kernel.with_range(phi)?))
            .collect()
    }
}
