use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use super::GaussianFactorization;
use crate::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn check_dims(x: &DVector<f64>, mean: &DVector<f64>, fac: &GaussianFactorization) -> Result<()> {
    if x.len() != mean.len() || x.len() != fac.dim() {
        return Err(Error::Dimension(format!(
            "vector {} / mean {} / factor {}",
            x.len(),
            mean.len(),
            fac.dim()
        )));
    }
    Ok(())
}

/// Log-density of `N(mean, sigma2 * R)` where `fac` factors `R`.
pub fn mvn_logpdf(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    sigma2: f64,
    fac: &GaussianFactorization,
) -> Result<f64> {
    check_dims(x, mean, fac)?;
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("variance scale must be positive, got {sigma2}")));
    }
    let n = x.len() as f64;
    let q = fac.quad_form(&(x - mean));
    Ok(-0.5 * n * (LN_2PI + sigma2.ln()) - 0.5 * fac.log_det() - 0.5 * q / sigma2)
}

/// Draw from `N(mean, sigma2 * R)`: `mean + sigma * L z`.
pub fn mvn_sample<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    sigma2: f64,
    fac: &GaussianFactorization,
    rng: &mut R,
) -> Result<DVector<f64>> {
    check_dims(mean, mean, fac)?;
    if !(sigma2 >= 0.0) {
        return Err(Error::Domain(format!("variance scale must be nonnegative, got {sigma2}")));
    }
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    if sigma2 == 0.0 {
        return Ok(mean.clone());
    }
    Ok(mean + fac.color(&z) * sigma2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::{build_correlation, CorrelationKernel, SiteSet};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn site_grid_fac() -> (DMatrix<f64>, GaussianFactorization) {
        let sites = SiteSet::equispaced(11, 0.0, 1.0);
        let r = build_correlation(&sites, &CorrelationKernel::exponential(0.4).unwrap()).unwrap();
        let f = GaussianFactorization::new(&r).unwrap();
        (r, f)
    }

    #[test]
    fn scalar_at_mean() {
        let f = GaussianFactorization::identity(1);
        let x = DVector::from_element(1, 0.3);
        let v = mvn_logpdf(&x, &x, 1.0, &f).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn bivariate_identity() {
        let f = GaussianFactorization::identity(2);
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let m = DVector::zeros(2);
        let v = mvn_logpdf(&x, &m, 1.0, &f).unwrap();
        let expect = -(2.0 * std::f64::consts::PI).ln() - 0.5;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn matches_dense_inverse_reference() {
        let (r, f) = site_grid_fac();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inv = r.clone().try_inverse().unwrap();
        let det = r.determinant();
        for _ in 0..20 {
            let x = DVector::from_fn(11, |_, _| rng.sample::<f64, _>(StandardNormal));
            let m = DVector::from_fn(11, |_, _| rng.random_range(-1.0..1.0));
            let s2: f64 = rng.random_range(0.2..3.0);
            let d = &x - &m;
            let reference = -5.5 * (2.0 * std::f64::consts::PI * s2).ln() - 0.5 * det.ln()
                - 0.5 * d.dot(&(&inv * &d)) / s2;
            let v = mvn_logpdf(&x, &m, s2, &f).unwrap();
            assert!((v - reference).abs() < 1e-9, "{v} vs {reference}");
        }
    }

    #[test]
    fn errors() {
        let f = GaussianFactorization::identity(2);
        let x = DVector::zeros(2);
        assert!(matches!(mvn_logpdf(&x, &x, 0.0, &f), Err(Error::Domain(_))));
        let y = DVector::zeros(3);
        assert!(matches!(mvn_logpdf(&y, &y, 1.0, &f), Err(Error::Dimension(_))));
    }

    #[test]
    fn maximized_at_mean() {
        let (_, f) = site_grid_fac();
        let m = DVector::from_fn(11, |i, _| (i as f64).cos());
        let h = 1e-5;
        for i in 0..11 {
            let mut up = m.clone();
            up[i] += h;
            let mut dn = m.clone();
            dn[i] -= h;
            let g = (mvn_logpdf(&up, &m, 0.7, &f).unwrap() - mvn_logpdf(&dn, &m, 0.7, &f).unwrap()) / (2.0 * h);
            assert!(g.abs() < 1e-6);
        }
    }

    #[test]
    fn zero_variance_returns_mean() {
        let (_, f) = site_grid_fac();
        let m = DVector::from_element(11, 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(mvn_sample(&m, 0.0, &f, &mut rng).unwrap(), m);
    }

    #[test]
    fn sample_moments() {
        let f = GaussianFactorization::identity(3);
        let m = DVector::zeros(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut ss = [0.0; 3];
        for _ in 0..n {
            let x = mvn_sample(&m, 2.0, &f, &mut rng).unwrap();
            for i in 0..3 {
                ss[i] += x[i] * x[i];
            }
        }
        for v in ss {
            assert!((v / n as f64 / 2.0 - 1.0).abs() < 0.05);
        }

        let (_, f) = site_grid_fac();
        let m = DVector::zeros(11);
        let mut cross = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let x = mvn_sample(&m, 1.0, &f, &mut rng).unwrap();
            cross += x[4] * x[5];
            sq += 0.5 * (x[4] * x[4] + x[5] * x[5]);
        }
        let corr = cross / sq;
        assert!((corr - (-0.1f64 / 0.4).exp()).abs() < 0.02);
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let (_, f) = site_grid_fac();
        let m = DVector::zeros(11);
        let a = mvn_sample(&m, 1.0, &f, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = mvn_sample(&m, 1.0, &f, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }
}
