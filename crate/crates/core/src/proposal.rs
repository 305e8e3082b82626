//! Importance proposals for `p(x_t | x_{t-1}, y_t, theta, phi)` and the
//! single-chain filtering step.
//!
//! The Gaussian proposal is the Laplace approximation at the mode of
//! `f(x) = -log p(y_t | x) - log p(x | x_{t-1}, theta, phi)`. Two copula
//! corrections use per-coordinate skew-normal marginals fitted to the
//! first three moments of a third-order expansion around the mode.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::skewnormal::{std_normal_pdf, SkewNormal};
use crate::spatial::{
    backward_in_place, cholesky_lower, forward_in_place, mvn_logpdf, obs_loglik, Family, ObsBatch,
    ObservationModel, RangeFactor, LN_2PI,
};
use crate::suffstats::{PhiLikStats, PriorHyper, Theta, WhitenedCovariates};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    Gaussian,
    #[default]
    MeanOnly,
    MeanSkew,
}

impl std::fmt::Display for ProposalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gaussian => "gaussian",
            Self::MeanOnly => "mean_only",
            Self::MeanSkew => "mean_skew",
        })
    }
}

impl std::str::FromStr for ProposalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "mean_only" => Ok(Self::MeanOnly),
            "mean_skew" => Ok(Self::MeanSkew),
            other => Err(Error::Config(format!(
                "unknown proposal mode '{other}' (expected gaussian, mean_only or mean_skew)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewtonSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
            max_halvings: 30,
        }
    }
}

/// Laplace approximation `N(x_hat, H^{-1})` with `H^{-1} = A A'`,
/// `A = L C^{-T}`, `R = L L'` and `C C' = I / sigma2 + L' D L`.
#[derive(Debug, Clone)]
pub struct ModeFit {
    pub x_hat: DVector<f64>,
    /// Objective value at the mode.
    pub f_min: f64,
    pub iterations: usize,
    l: DMatrix<f64>,
    c: DMatrix<f64>,
    a: DMatrix<f64>,
    log_det_cov: f64,
}

impl ModeFit {
    /// `H^{-1}` (for tests and diagnostics).
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.a * self.a.transpose()
    }

    /// `H` reconstructed from the factors.
    pub fn hessian(&self) -> DMatrix<f64> {
        // H = L^{-T} C C' L^{-1}
        let n = self.x_hat.len();
        let mut linv = DMatrix::identity(n, n);
        for col in linv.as_mut_slice().chunks_mut(n) {
            forward_in_place(&self.l, col);
        }
        let b = self.c.transpose() * &linv;
        b.transpose() * b
    }

    pub fn log_det_cov(&self) -> f64 {
        self.log_det_cov
    }

    pub fn marginal_variances(&self) -> DVector<f64> {
        DVector::from_iterator(self.a.nrows(), self.a.row_iter().map(|r| r.norm_squared()))
    }

    /// `A^{-1} v = C' L^{-1} v`.
    fn standardize(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut w = v.clone();
        forward_in_place(&self.l, w.as_mut_slice());
        self.c.tr_mul(&w)
    }
}

struct Target<'a> {
    y: &'a ObsBatch,
    mu: &'a DVector<f64>,
    sigma2: f64,
    rf: &'a RangeFactor,
    family: Family,
}

impl Target<'_> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let mut data = 0.0;
        for i in 0..x.len() {
            if self.y.observed[i] {
                data += self.family.neg_kernel_derivs(self.y.y[i], self.y.tau[i], x[i])[0];
            }
        }
        data + 0.5 * self.rf.fac.quad_form(&(x - self.mu)) / self.sigma2
    }

    /// Gradient and data-curvature diagonal.
    fn grad_curv(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = x.len();
        let mut g = self.rf.fac.solve(&(x - self.mu)) / self.sigma2;
        let mut d = DVector::zeros(n);
        for i in 0..n {
            if self.y.observed[i] {
                let der = self.family.neg_kernel_derivs(self.y.y[i], self.y.tau[i], x[i]);
                g[i] += der[1];
                d[i] = der[2];
            }
        }
        (g, d)
    }

    fn factor(&self, d: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let l = self.rf.fac.lower().clone();
        let mut b = l.clone();
        for (i, mut row) in b.row_iter_mut().enumerate() {
            row *= d[i].max(0.0).sqrt();
        }
        let mut m = b.tr_mul(&b);
        for i in 0..m.nrows() {
            m[(i, i)] += 1.0 / self.sigma2;
        }
        let c = cholesky_lower(&m)?;
        Ok((l, c))
    }
}

/// Damped Newton search for the mode of
/// `-log p(y | x) + (x - mu)' R^{-1} (x - mu) / (2 sigma2)`.
pub fn fit_mode(
    y: &ObsBatch,
    mu: &DVector<f64>,
    sigma2: f64,
    rf: &RangeFactor,
    family: Family,
    settings: &NewtonSettings,
) -> Result<ModeFit> {
    let n = mu.len();
    if y.len() != n || rf.fac.dim() != n {
        return Err(Error::Dimension(format!(
            "mode search with {} observations, mean {}, factor {}",
            y.len(),
            n,
            rf.fac.dim()
        )));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Domain(format!("sigma2 must be positive, got {sigma2}")));
    }
    let target = Target {
        y,
        mu,
        sigma2,
        rf,
        family,
    };
    // Start from per-site scalar modes so the data curvature is moderate
    // even when `mu` is far from the data.
    let mut x = mu.clone();
    for i in 0..n {
        if y.observed[i] {
            x[i] = scalar_mode(family, y.y[i], y.tau[i], mu[i], sigma2);
        }
    }
    let mut fx = target.value(&x);
    let mut iterations = 0;
    loop {
        let (g, d) = target.grad_curv(&x);
        let gnorm = g.amax();
        let (l, c) = target.factor(&d)?;
        if gnorm < settings.tol || !gnorm.is_finite() || iterations >= settings.max_iter {
            if !(gnorm < settings.tol) {
                return Err(Error::NonConvergence {
                    iterations,
                    grad_norm: gnorm,
                    last_iterate: x.as_slice().to_vec(),
                });
            }
            return Ok(finish(x, fx, iterations, l, c));
        }
        // step = -A A' g with A = L C^{-T}
        let mut w = l.tr_mul(&g);
        forward_in_place(&c, w.as_mut_slice());
        backward_in_place(&c, w.as_mut_slice());
        let step = -(&l * w);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=settings.max_halvings {
            let cand = &x + &step * scale;
            let fc = target.value(&cand);
            if fc <= fx + 1e-13 * (1.0 + fx.abs()) {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // No decrease is possible at rounding level; accept if the
            // gradient is already small relative to its terms.
            if gnorm < settings.tol * 1e3 {
                return Ok(finish(x, fx, iterations, l, c));
            }
            return Err(Error::NonConvergence {
                iterations,
                grad_norm: gnorm,
                last_iterate: x.as_slice().to_vec(),
            });
        }
    }
}

/// Minimizer of `k(x) + (x - m)^2 / (2 v)`: Newton on the increasing
/// gradient, safeguarded by bisection within an expanding bracket.
fn scalar_mode(family: Family, y: f64, tau: f64, m: f64, v: f64) -> f64 {
    let grad = |x: f64| {
        let k = family.neg_kernel_derivs(y, tau, x);
        (k[1] + (x - m) / v, k[2] + 1.0 / v)
    };
    // an overflowing gradient still has a usable sign
    let g0 = grad(m).0;
    if g0 == 0.0 || g0.is_nan() {
        return m;
    }
    let dir = if g0 > 0.0 { -1.0 } else { 1.0 };
    let mut w = 1.0;
    let far = loop {
        let x = m + dir * w;
        let gx = grad(x).0;
        if gx.is_nan() || w > 1e300 {
            return m;
        }
        if (gx > 0.0) != (g0 > 0.0) {
            break x;
        }
        w *= 2.0;
    };
    let (mut lo, mut hi) = if dir < 0.0 { (far, m) } else { (m, far) };
    let mut x = 0.5 * (lo + hi);
    let mut last_step = hi - lo;
    for _ in 0..300 {
        let (g, h) = grad(x);
        if g < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        // bisect when Newton leaves the bracket or stops halving the step
        let mut nx = x - g / h;
        if !(nx > lo && nx < hi) || (nx - x).abs() > 0.5 * last_step {
            nx = 0.5 * (lo + hi);
        }
        last_step = (nx - x).abs();
        if (nx - x).abs() <= 1e-12 * (1.0 + x.abs()) {
            return nx;
        }
        x = nx;
    }
    x
}

fn finish(x: DVector<f64>, f_min: f64, iterations: usize, l: DMatrix<f64>, c: DMatrix<f64>) -> ModeFit {
    let n = x.len();
    // A' = C^{-1} L'
    let mut at = l.transpose();
    for col in at.as_mut_slice().chunks_mut(n) {
        forward_in_place(&c, col);
    }
    let log_det_cov =
        2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>() - 2.0 * c.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    ModeFit {
        x_hat: x,
        f_min,
        iterations,
        l,
        c,
        a: at.transpose(),
        log_det_cov,
    }
}

/// Largest standardized third derivative `|d3| s^3` for which the moment
/// expansion is used.
pub const EXPANSION_LIMIT: f64 = 1.0;

/// Skew-normal marginals matched to the expanded target at the mode.
/// Unobserved coordinates, and coordinates where the expansion is out of
/// range (see [`EXPANSION_LIMIT`]), get symmetric marginals.
pub fn fit_skew_marginals(mode: &ModeFit, y: &ObsBatch, family: Family) -> Vec<SkewNormal> {
    let vars = mode.marginal_variances();
    (0..mode.x_hat.len())
        .map(|i| {
            let xh = mode.x_hat[i];
            let s2 = vars[i];
            let (d3, d4, d5) = if y.observed[i] {
                let d = family.neg_kernel_derivs(y.y[i], y.tau[i], xh);
                (d[3], d[4], d[5])
            } else {
                (0.0, 0.0, 0.0)
            };
            if !(d3.abs() * s2.powf(1.5) <= EXPANSION_LIMIT) {
                return SkewNormal {
                    xi: xh,
                    omega: s2.sqrt(),
                    a: 0.0,
                };
            }
            let (mean, var, skew) = crate::skewnormal::expansion_moments(xh, s2, d3, d4, d5);
            SkewNormal::from_moments(mean, var.sqrt(), skew).unwrap_or(SkewNormal {
                xi: xh,
                omega: s2.sqrt(),
                a: 0.0,
            })
        })
        .collect()
}

/// Laplace fit plus marginal corrections.
#[derive(Debug, Clone)]
pub struct ProposalFit {
    pub mode: ProposalMode,
    pub laplace: ModeFit,
    pub marginals: Vec<SkewNormal>,
    /// Gaussian centre: the mode, or the corrected means for `MeanOnly`.
    pub center: DVector<f64>,
    sd: DVector<f64>,
}

impl ProposalFit {
    pub fn new(laplace: ModeFit, marginals: Vec<SkewNormal>, mode: ProposalMode) -> Self {
        let center = match mode {
            ProposalMode::MeanOnly => DVector::from_iterator(marginals.len(), marginals.iter().map(|m| m.mean())),
            _ => laplace.x_hat.clone(),
        };
        let sd = laplace.marginal_variances().map(f64::sqrt);
        Self {
            mode,
            laplace,
            marginals,
            center,
            sd,
        }
    }

    pub fn build(
        y: &ObsBatch,
        mu: &DVector<f64>,
        sigma2: f64,
        rf: &RangeFactor,
        family: Family,
        mode: ProposalMode,
        settings: &NewtonSettings,
    ) -> Result<Self> {
        let laplace = fit_mode(y, mu, sigma2, rf, family, settings)?;
        let marginals = fit_skew_marginals(&laplace, y, family);
        Ok(Self::new(laplace, marginals, mode))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn delta_sq(&self) -> impl Iterator<Item = f64> + '_ {
        self.marginals.iter().map(|m| m.delta_sq())
    }

    fn gaussian_logpdf_std(&self, z: &DVector<f64>) -> f64 {
        -0.5 * self.dim() as f64 * LN_2PI - 0.5 * self.laplace.log_det_cov - 0.5 * z.norm_squared()
    }

    /// Log-Jacobian terms `log sn_i(x'_i) - log N(x_i; m_i, s_i^2)` of the
    /// marginal transform.
    fn copula_correction(&self, x: &DVector<f64>, z_marg: &DVector<f64>) -> f64 {
        (0..self.dim())
            .map(|i| {
                let m = &self.marginals[i];
                if m.a == 0.0 && m.xi == self.laplace.x_hat[i] && m.omega == self.sd[i] {
                    0.0
                } else {
                    m.ln_pdf(x[i]) - (std_normal_pdf(z_marg[i]).ln() - self.sd[i].ln())
                }
            })
            .sum()
    }
}

/// `N` draws from the proposal with their log-densities.
pub fn sample_proposal<R: Rng + ?Sized>(
    fit: &ProposalFit,
    n_particles: usize,
    rng: &mut R,
) -> Result<(Vec<DVector<f64>>, Vec<f64>)> {
    let n = fit.dim();
    let mut particles = Vec::with_capacity(n_particles);
    let mut log_q = Vec::with_capacity(n_particles);
    for _ in 0..n_particles {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xg = &fit.center + &fit.laplace.a * &z;
        let lq_gauss = fit.gaussian_logpdf_std(&z);
        match fit.mode {
            ProposalMode::Gaussian | ProposalMode::MeanOnly => {
                particles.push(xg);
                log_q.push(lq_gauss);
            }
            ProposalMode::MeanSkew => {
                let zm = DVector::from_fn(n, |i, _| (xg[i] - fit.laplace.x_hat[i]) / fit.sd[i]);
                let mut x = xg.clone();
                for i in 0..n {
                    let m = &fit.marginals[i];
                    if !(m.a == 0.0 && m.xi == fit.laplace.x_hat[i] && m.omega == fit.sd[i]) {
                        x[i] = m.quantile_from_z(zm[i])?;
                    }
                }
                let lq = lq_gauss + fit.copula_correction(&x, &zm);
                particles.push(x);
                log_q.push(lq);
            }
        }
    }
    Ok((particles, log_q))
}

/// Log-density of the proposal at an arbitrary point.
pub fn proposal_logpdf(fit: &ProposalFit, x: &DVector<f64>) -> f64 {
    match fit.mode {
        ProposalMode::Gaussian | ProposalMode::MeanOnly => {
            let z = fit.laplace.standardize(&(x - &fit.center));
            fit.gaussian_logpdf_std(&z)
        }
        ProposalMode::MeanSkew => {
            let n = fit.dim();
            let zm = DVector::from_fn(n, |i, _| {
                let m = &fit.marginals[i];
                if m.a == 0.0 && m.xi == fit.laplace.x_hat[i] && m.omega == fit.sd[i] {
                    (x[i] - fit.laplace.x_hat[i]) / fit.sd[i]
                } else {
                    m.z_from_value(x[i])
                }
            });
            let xg = &fit.laplace.x_hat + fit.sd.component_mul(&zm);
            let z = fit.laplace.standardize(&(xg - &fit.center));
            fit.gaussian_logpdf_std(&z) + fit.copula_correction(x, &zm)
        }
    }
}

/// Normalized weights and their effective sample size.
#[derive(Debug, Clone)]
pub struct WeightedParticles {
    pub log_weights: Vec<f64>,
    pub normalized: Vec<f64>,
    pub ess: f64,
}

impl WeightedParticles {
    /// Normalizes log-weights by log-sum-exp.
    pub fn from_log_weights(log_weights: Vec<f64>) -> Result<Self> {
        let max = log_weights.iter().cloned().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        let w: Vec<f64> = log_weights
            .iter()
            .map(|&lw| if lw.is_nan() { 0.0 } else { (lw - max).exp() })
            .collect();
        let s: f64 = w.iter().sum();
        let normalized: Vec<f64> = w.iter().map(|v| v / s).collect();
        Ok(Self {
            ess: effective_sample_size(&normalized),
            log_weights,
            normalized,
        })
    }

    /// Categorical draw of one index.
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, w) in self.normalized.iter().enumerate() {
            if *w > 0.0 {
                last = i;
            }
            acc += w;
            if u < acc {
                return i;
            }
        }
        last
    }
}

/// `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    if s2 == 0.0 {
        return 0.0;
    }
    (s * s / s2).clamp(1.0, w.len() as f64)
}

/// Weights the particles against the exact target and selects one.
#[allow(clippy::too_many_arguments)]
pub fn weigh_and_resample<R: Rng + ?Sized>(
    particles: &[DVector<f64>],
    log_q: &[f64],
    y: &ObsBatch,
    mu: &DVector<f64>,
    sigma2: f64,
    rf: &RangeFactor,
    model: &ObservationModel,
    rng: &mut R,
) -> Result<(usize, WeightedParticles)> {
    if particles.is_empty() || particles.len() != log_q.len() {
        return Err(Error::Dimension("particle and density counts differ or are zero".into()));
    }
    let mut lw = Vec::with_capacity(particles.len());
    for (x, lq) in particles.iter().zip(log_q) {
        let v = obs_loglik(y, x, model)? + mvn_logpdf(x, mu, sigma2, &rf.fac)? - lq;
        lw.push(v);
    }
    let wp = WeightedParticles::from_log_weights(lw)?;
    let j = wp.select(rng);
    Ok((j, wp))
}

/// One chain of the population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub k: usize,
    pub l: usize,
    pub x: DVector<f64>,
    pub theta: Theta,
    pub stats: PhiLikStats,
    pub last_ess: f64,
}

impl ChainState {
    pub fn t(&self) -> usize {
        self.stats.t()
    }

    /// Seeds a chain at `t = 0`; `x_0` is drawn given the initial `theta`.
    /// `first` is the first observed day and its design, required by
    /// [`InitMethod::FirstObservation`].
    #[allow(clippy::too_many_arguments)]
    pub fn from_prior<R: Rng + ?Sized>(
        k: usize,
        l: usize,
        prior: &PriorHyper,
        init: InitMethod,
        first: Option<(&ObsBatch, &DMatrix<f64>, Family)>,
        g0: &DMatrix<f64>,
        wg0: &WhitenedCovariates,
        factors: &[RangeFactor],
        own: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let theta = match (init, first) {
            (InitMethod::PriorPredictive, _) => Theta::sample_prior(prior, rng)?,
            (InitMethod::PriorMode, _) => prior_mode_theta(prior),
            (InitMethod::FirstObservation, Some((y, g, family))) => theta_from_observation(y, g, family, prior),
            (InitMethod::FirstObservation, None) => {
                return Err(Error::Contract("first-observation seeding needs the first day".into()))
            }
        };
        let mean = g0 * &theta.beta;
        let x = crate::spatial::mvn_sample(&mean, theta.sigma2, &factors[own].fac, rng)?;
        let stats = PhiLikStats::init(&x, wg0, factors, own)?;
        Ok(Self {
            k,
            l,
            x,
            theta,
            stats,
            last_ess: f64::NAN,
        })
    }

    pub fn heap_bytes(&self) -> usize {
        (self.x.len() + self.theta.beta.len()) * std::mem::size_of::<f64>() + self.stats.heap_bytes()
    }
}

/// How chains are seeded at `t = 0`. In every case `x_0` is drawn from
/// `N(G_0 beta, sigma2 R)` given a starting `theta`.
///
/// - `FirstObservation`: `theta` fitted to the first observed day (see
///   [`theta_from_observation`]). Chains are seeded when that day arrives.
/// - `PriorPredictive`: `theta` drawn from the prior.
/// - `PriorMode`: `theta` at the prior mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    #[default]
    FirstObservation,
    PriorPredictive,
    PriorMode,
}

/// Prior means of `alpha` and `beta`, inverse-gamma mode of `sigma2`.
pub fn prior_mode_theta(prior: &PriorHyper) -> Theta {
    Theta::new(
        prior.alpha_prior_mean(),
        prior.beta_prior_mean().as_slice().to_vec(),
        prior.r0 / (prior.c0 + 2.0),
    )
}

/// Starting `theta` from one day of data: `beta` by least squares of the
/// empirical latent values (`log((y + 1/2) / tau)` for counts, `y / tau`
/// for the Gaussian family) on the design rows of observed sites, `sigma2`
/// the residual variance floored at the prior mode, `alpha` the prior mean.
/// Falls back to [`prior_mode_theta`] when the observed rows cannot
/// determine `beta` with a residual degree of freedom.
pub fn theta_from_observation(y: &ObsBatch, g: &DMatrix<f64>, family: Family, prior: &PriorHyper) -> Theta {
    let fallback = prior_mode_theta(prior);
    let rows: Vec<usize> = (0..y.len()).filter(|&i| y.observed[i]).collect();
    let m = g.ncols();
    if rows.len() <= m {
        return fallback;
    }
    let z = DVector::from_iterator(
        rows.len(),
        rows.iter().map(|&i| match family {
            Family::Poisson => ((y.y[i] + 0.5) / y.tau[i]).ln(),
            Family::Gaussian => y.y[i] / y.tau[i],
        }),
    );
    let gm = g.select_rows(&rows);
    let svd = gm.clone().svd(true, true);
    if svd.rank(1e-10 * svd.singular_values.max()) < m {
        return fallback;
    }
    let Ok(beta) = svd.solve(&z, 1e-12) else {
        return fallback;
    };
    let rss = (&z - &gm * &beta).norm_squared();
    let sigma2 = (rss / (rows.len() - m) as f64).max(fallback.sigma2);
    if !(sigma2.is_finite() && beta.iter().all(|b| b.is_finite())) {
        return fallback;
    }
    Theta::new(prior.alpha_prior_mean(), beta.as_slice().to_vec(), sigma2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSettings {
    pub n_particles: usize,
    pub gibbs_iters: usize,
    pub mode: ProposalMode,
    pub newton: NewtonSettings,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            n_particles: 100,
            gibbs_iters: 50,
            mode: ProposalMode::MeanOnly,
            newton: NewtonSettings::default(),
        }
    }
}

/// Data shared by every chain at one time step.
pub struct StepInputs<'a> {
    pub y: &'a ObsBatch,
    pub g_t: &'a DMatrix<f64>,
    pub g_prev: &'a DMatrix<f64>,
    pub wg_t: &'a WhitenedCovariates,
    pub wg_prev: &'a WhitenedCovariates,
    pub factors: &'a [RangeFactor],
    pub prior: &'a PriorHyper,
    pub model: &'a ObservationModel,
}

/// Per-step diagnostics of one chain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub ess: f64,
    pub delta_sq_sum: f64,
    pub delta_sq_max: f64,
    pub delta_sq_count: usize,
}

/// Prior mean of `x_t`: `G_t beta + alpha (x_{t-1} - G_{t-1} beta)`.
pub fn transition_mean(theta: &Theta, x_prev: &DVector<f64>, g_t: &DMatrix<f64>, g_prev: &DMatrix<f64>) -> DVector<f64> {
    g_t * &theta.beta + (x_prev - g_prev * &theta.beta) * theta.alpha
}

/// Gibbs update of `theta`, proposal, weighting, selection and statistics
/// update for one chain at its own sampling range.
pub fn filter_step_fixed_phi<R: Rng + ?Sized>(
    chain: &ChainState,
    inp: &StepInputs,
    settings: &FilterSettings,
    rng: &mut R,
) -> Result<(ChainState, StepDiagnostics)> {
    let own = chain.stats.own_index();
    let rf = &inp.factors[own];
    let theta = chain.stats.own().gibbs_sweep(&chain.theta, inp.prior, settings.gibbs_iters, rng)?;
    let mu = transition_mean(&theta, &chain.x, inp.g_t, inp.g_prev);
    let fit = ProposalFit::build(inp.y, &mu, theta.sigma2, rf, inp.model.family, settings.mode, &settings.newton)?;
    let (particles, log_q) = sample_proposal(&fit, settings.n_particles, rng)?;
    let (j, wp) = weigh_and_resample(&particles, &log_q, inp.y, &mu, theta.sigma2, rf, inp.model, rng)?;
    let x_new = particles[j].clone();

    let mut diag = StepDiagnostics {
        ess: wp.ess,
        ..Default::default()
    };
    for (i, d2) in fit.delta_sq().enumerate() {
        if inp.y.observed[i] {
            diag.delta_sq_sum += d2;
            diag.delta_sq_max = diag.delta_sq_max.max(d2);
            diag.delta_sq_count += 1;
        }
    }

    let mut stats = chain.stats.clone();
    stats.update(&x_new, &chain.x, inp.wg_t, inp.wg_prev, inp.factors)?;
    Ok((
        ChainState {
            k: chain.k,
            l: chain.l,
            x: x_new,
            theta,
            stats,
            last_ess: wp.ess,
        },
        diag,
    ))
}
