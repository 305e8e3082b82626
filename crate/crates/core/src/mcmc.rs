//! Offline MCMC smoother over the full data set, used as a reference for
//! the online estimates.
//!
//! One sweep updates `theta` by a conjugate Gibbs scan, every `x_{i,t}` by
//! a Gaussian random-walk Metropolis step on its full conditional, and
//! `log phi` by a random-walk Metropolis step under an exponential prior
//! on `phi`. Step sizes adapt during burn-in and are frozen afterwards.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::spatial::{CorrelationKernel, ObsBatch, ObservationModel, RangeFactor, SiteSet};
use crate::suffstats::{PriorHyper, TemporalSuffStats, Theta};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub thin: usize,
    pub n_samples: usize,
    /// Mean of the exponential prior on `phi`.
    pub phi_prior_mean: f64,
    /// Initial random-walk scale on `log phi`.
    pub phi_step: f64,
    /// Initial random-walk scale for the latent coordinates.
    pub x_step: f64,
    pub accept_band: (f64, f64),
    /// Holds `phi` at this value instead of sampling it.
    pub fixed_phi: Option<f64>,
    pub phi_init: f64,
    /// Keep the whole latent path in every retained sample.
    pub store_paths: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            burn_in: 50,
            thin: 10,
            n_samples: 3000,
            phi_prior_mean: 0.4,
            phi_step: 0.3,
            x_step: 0.5,
            accept_band: (0.2, 0.4),
            fixed_phi: None,
            phi_init: 0.4,
            store_paths: false,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.accept_band;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::Config(format!("acceptance band ({lo}, {hi}) must lie inside (0, 1)")));
        }
        if self.thin == 0 || self.n_samples == 0 {
            return Err(Error::Config("thinning and sample size must be at least 1".into()));
        }
        if !(self.phi_prior_mean > 0.0) || !(self.phi_step > 0.0) || !(self.x_step > 0.0) {
            return Err(Error::Config("prior mean and step scales must be positive".into()));
        }
        let phi0 = self.fixed_phi.unwrap_or(self.phi_init);
        if !(phi0 > 0.0) {
            return Err(Error::Config(format!("initial phi must be positive, got {phi0}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcSample {
    pub theta: Theta,
    pub phi: f64,
    /// `x_T`.
    pub x_last: DVector<f64>,
    /// `x_{0:T}` when paths are stored.
    pub path: Option<Vec<DVector<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcOutput {
    pub samples: Vec<McmcSample>,
    /// Post-burn-in acceptance rates.
    pub accept_x: f64,
    pub accept_phi: f64,
    pub x_step: f64,
    pub phi_step: f64,
}

impl McmcOutput {
    pub fn column<F: Fn(&McmcSample) -> f64>(&self, f: F) -> Vec<f64> {
        self.samples.iter().map(f).collect()
    }
}

/// Data and model for the offline sampler. `ys[t - 1]` holds `y_t` and
/// `gs[t]` holds `G_t` for `t = 0..=T`.
pub struct OfflineProblem<'a> {
    pub sites: &'a SiteSet,
    pub kernel: &'a CorrelationKernel,
    pub model: &'a ObservationModel,
    pub prior: &'a PriorHyper,
    pub ys: &'a [ObsBatch],
    pub gs: &'a [DMatrix<f64>],
}

/// Accumulated statistics of a full latent path.
pub fn path_stats(xs: &[DVector<f64>], gs: &[DMatrix<f64>], rf: &RangeFactor) -> Result<TemporalSuffStats> {
    if xs.is_empty() || xs.len() != gs.len() {
        return Err(Error::Dimension("path and covariate lengths differ".into()));
    }
    let mut st = TemporalSuffStats::init(&xs[0], &gs[0], rf)?;
    for t in 1..xs.len() {
        st.update(&xs[t], &xs[t - 1], &gs[t], &gs[t - 1], rf)?;
    }
    Ok(st)
}

/// `log p(x_{0:T} | theta, phi)` for a stored path.
pub fn path_loglik(xs: &[DVector<f64>], gs: &[DMatrix<f64>], rf: &RangeFactor, theta: &Theta) -> Result<f64> {
    path_stats(xs, gs, rf)?.joint_state_loglik(theta)
}

struct Precision {
    q: DMatrix<f64>,
}

impl Precision {
    fn new(rf: &RangeFactor) -> Self {
        let n = rf.fac.dim();
        Self {
            q: rf.fac.solve_matrix(&DMatrix::identity(n, n)),
        }
    }
}

/// Residuals `e_t = eta_t - alpha eta_{t-1}` and `w_t = R^{-1} e_t`.
fn residuals(xs: &[DVector<f64>], gs: &[DMatrix<f64>], theta: &Theta, prec: &Precision) -> Vec<DVector<f64>> {
    let eta: Vec<DVector<f64>> = xs.iter().zip(gs).map(|(x, g)| x - g * &theta.beta).collect();
    (0..xs.len())
        .map(|t| {
            let e = if t == 0 { eta[0].clone() } else { &eta[t] - &eta[t - 1] * theta.alpha };
            &prec.q * e
        })
        .collect()
}

fn log_exp_prior(phi: f64, mean: f64) -> f64 {
    -mean.ln() - phi / mean
}

fn initial_path(problem: &OfflineProblem) -> Vec<DVector<f64>> {
    let n = problem.sites.len();
    let mut xs = Vec::with_capacity(problem.gs.len());
    for t in 0..problem.gs.len() {
        let v = if t == 0 {
            problem.ys.first()
        } else {
            problem.ys.get(t - 1)
        };
        let x = DVector::from_fn(n, |i, _| match v {
            Some(b) if b.observed[i] && b.tau[i] > 0.0 => ((b.y[i].max(0.0) + 0.5) / b.tau[i]).ln(),
            _ => 0.0,
        });
        xs.push(x);
    }
    xs
}

/// One random-walk Metropolis step on `log phi` with everything else
/// held fixed. `stats` must be the path statistics at `phi`. Returns the
/// new range with its factor and statistics when the move is accepted.
#[allow(clippy::too_many_arguments)]
pub fn range_mh_step<R: Rng + ?Sized>(
    phi: f64,
    step: f64,
    stats: &TemporalSuffStats,
    xs: &[DVector<f64>],
    gs: &[DMatrix<f64>],
    sites: &SiteSet,
    kernel: &CorrelationKernel,
    theta: &Theta,
    prior_mean: f64,
    rng: &mut R,
) -> Result<Option<(f64, RangeFactor, TemporalSuffStats)>> {
    let prop = phi * (step * rng.sample::<f64, _>(StandardNormal)).exp();
    let rf_new = RangeFactor::build(sites, &kernel.with_range(prop)?)?;
    let st_new = path_stats(xs, gs, &rf_new)?;
    let log_r = st_new.joint_state_loglik(theta)? - stats.joint_state_loglik(theta)?
        + log_exp_prior(prop, prior_mean)
        - log_exp_prior(phi, prior_mean)
        + (prop / phi).ln();
    if log_r >= 0.0 || rng.random::<f64>().ln() < log_r {
        Ok(Some((prop, rf_new, st_new)))
    } else {
        Ok(None)
    }
}

/// Runs the sampler; returns exactly `n_samples` retained draws.
pub fn run_offline<R: Rng + ?Sized>(problem: &OfflineProblem, config: &McmcConfig, rng: &mut R) -> Result<McmcOutput> {
    config.validate()?;
    problem.prior.validate()?;
    let n = problem.sites.len();
    let t_max = problem.ys.len();
    if problem.gs.len() != t_max + 1 {
        return Err(Error::Dimension(format!(
            "{} design matrices for {} observation times (expected T + 1)",
            problem.gs.len(),
            t_max
        )));
    }
    for (t, y) in problem.ys.iter().enumerate() {
        if y.len() != n {
            return Err(Error::Dimension(format!("observation batch {} has {} sites", t + 1, y.len())));
        }
        y.validate(problem.model.family)?;
    }
    let family = problem.model.family;

    let mut phi = config.fixed_phi.unwrap_or(config.phi_init);
    let mut rf = RangeFactor::build(problem.sites, &problem.kernel.with_range(phi)?)?;
    let mut prec = Precision::new(&rf);
    let mut xs = initial_path(problem);
    let mut theta = Theta::new(0.0, problem.prior.beta_prior_mean().as_slice().to_vec(), 1.0);
    let mut stats = path_stats(&xs, problem.gs, &rf)?;

    let mut x_step = config.x_step;
    let mut phi_step = config.phi_step;
    let (mut acc_x, mut tried_x, mut acc_phi, mut tried_phi) = (0usize, 0usize, 0usize, 0usize);
    let total = config.burn_in + config.thin * config.n_samples;
    let mut samples = Vec::with_capacity(config.n_samples);
    let target = 0.5 * (config.accept_band.0 + config.accept_band.1);

    for sweep in 0..total {
        let adapting = sweep < config.burn_in;
        theta = stats.gibbs_sweep(&theta, problem.prior, 1, rng)?;

        // latent coordinates
        let mut w = residuals(&xs, problem.gs, &theta, &prec);
        let inv_s2 = 1.0 / theta.sigma2;
        let a = theta.alpha;
        let mut sweep_acc = 0usize;
        for t in 0..=t_max {
            for i in 0..n {
                let qii = prec.q[(i, i)];
                let delta = x_step * rng.sample::<f64, _>(StandardNormal);
                let mut d_prior = 2.0 * delta * w[t][i] + delta * delta * qii;
                if t < t_max {
                    d_prior += -2.0 * a * delta * w[t + 1][i] + a * a * delta * delta * qii;
                }
                let mut log_r = -0.5 * inv_s2 * d_prior;
                if t >= 1 {
                    let b = &problem.ys[t - 1];
                    if b.observed[i] {
                        log_r += family.log_density(b.y[i], b.tau[i], xs[t][i] + delta)
                            - family.log_density(b.y[i], b.tau[i], xs[t][i]);
                    }
                }
                if log_r >= 0.0 || rng.random::<f64>().ln() < log_r {
                    xs[t][i] += delta;
                    let col = prec.q.column(i);
                    w[t].axpy(delta, &col, 1.0);
                    if t < t_max {
                        w[t + 1].axpy(-a * delta, &col, 1.0);
                    }
                    sweep_acc += 1;
                }
            }
        }
        let frac = sweep_acc as f64 / (n * (t_max + 1)) as f64;
        if adapting {
            x_step *= ((frac - target) / (1.0 + sweep as f64).sqrt()).exp();
        } else {
            acc_x += sweep_acc;
            tried_x += n * (t_max + 1);
        }
        stats = path_stats(&xs, problem.gs, &rf)?;

        // range
        if config.fixed_phi.is_none() {
            let step = range_mh_step(
                phi,
                phi_step,
                &stats,
                &xs,
                problem.gs,
                problem.sites,
                problem.kernel,
                &theta,
                config.phi_prior_mean,
                rng,
            )?;
            let accepted = step.is_some();
            if let Some((p, rf_new, st_new)) = step {
                phi = p;
                rf = rf_new;
                prec = Precision::new(&rf);
                stats = st_new;
            }
            if adapting {
                let a = if accepted { 1.0 } else { 0.0 };
                phi_step *= ((a - target) / (1.0 + sweep as f64).sqrt()).exp();
            } else {
                acc_phi += accepted as usize;
                tried_phi += 1;
            }
        }

        if !adapting && (sweep - config.burn_in + 1) % config.thin == 0 {
            samples.push(McmcSample {
                theta: theta.clone(),
                phi,
                x_last: xs[t_max].clone(),
                path: config.store_paths.then(|| xs.clone()),
            });
        }
    }

    let accept_x = acc_x as f64 / tried_x.max(1) as f64;
    let accept_phi = if tried_phi > 0 { acc_phi as f64 / tried_phi as f64 } else { f64::NAN };
    let (lo, hi) = config.accept_band;
    if !(lo..=hi).contains(&accept_x) {
        log::warn!("latent acceptance {accept_x:.3} outside [{lo}, {hi}] (step {x_step:.4})");
    }
    if tried_phi > 0 && !(lo..=hi).contains(&accept_phi) {
        log::warn!("range acceptance {accept_phi:.3} outside [{lo}, {hi}] (step {phi_step:.4})");
    }
    Ok(McmcOutput {
        samples,
        accept_x,
        accept_phi,
        x_step,
        phi_step,
    })
}

/// Mode of a sample by Gaussian kernel density evaluated on `grid`
/// (Silverman bandwidth).
pub fn kde_mode(values: &[f64], grid: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[((n - 1.0) * p).round() as usize];
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = (0.9 * spread * n.powf(-0.2)).max(1e-12);
    let mut best = (f64::NEG_INFINITY, grid[0]);
    for &g in grid {
        let d: f64 = values.iter().map(|v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum();
        if d > best.0 {
            best = (d, g);
        }
    }
    best.1
}
