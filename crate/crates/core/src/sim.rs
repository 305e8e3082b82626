//! Simulation scenarios, a brute-force quadrature oracle for the marginal
//! likelihood of the range, and replication studies.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::covariates::CovariateSpec;
use crate::eb::{Estimator, GridSpec};
use crate::io::{ObservationRecord, RunConfig};
use crate::mcmc::{run_offline, McmcConfig, McmcOutput, OfflineProblem};
use crate::orchestrator::{Engine, EngineSetup, StepReport};
use crate::proposal::{FilterSettings, InitMethod, NewtonSettings, ProposalMode};
use crate::quad::gauss_hermite_prob;
use crate::rng::stream;
use crate::spatial::{
    build_correlation, mvn_sample, CorrelationKernel, Family, GaussianFactorization, ObsBatch, ObservationModel,
    SiteSet, LN_2PI,
};
use crate::suffstats::{PriorHyper, Theta};
use crate::{Error, Result};

/// A complete simulation setup: truth, design, grids and Monte Carlo
/// sizes. Together with `seed` it determines the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Sites are equispaced on `[0, 1]`.
    pub n_sites: usize,
    pub t_max: usize,
    pub alpha: f64,
    /// Constant mean (intercept-only design).
    pub beta: f64,
    pub sigma2: f64,
    pub phi: f64,
    pub family: Family,
    pub tau: f64,
    pub prior: PriorHyper,
    pub fine: Vec<f64>,
    pub coarse: Vec<f64>,
    pub reference: f64,
    /// Chains per coarse point (`L`).
    pub chains: usize,
    /// Particles per chain (`N`).
    pub particles: usize,
    /// Gibbs iterations per step (`L_g`).
    pub gibbs_iters: usize,
    pub mode: ProposalMode,
    pub estimator: Estimator,
    pub ci_level: f64,
    pub seed: u64,
}

impl Scenario {
    /// Common setup with `tau = 1`, `T = 100`, `L = N = 100` and
    /// `L_g = 50`.
    pub fn base() -> Self {
        Self {
            name: "base".into(),
            n_sites: 11,
            t_max: 100,
            alpha: 0.5,
            beta: 1.0,
            sigma2: 1.0,
            phi: 0.4,
            family: Family::Poisson,
            tau: 1.0,
            prior: PriorHyper::default_for(1),
            fine: GridSpec::linspace(0.2, 0.8, 41),
            coarse: vec![0.230, 0.335, 0.440, 0.545, 0.650, 0.755],
            reference: 0.230,
            chains: 100,
            particles: 100,
            gibbs_iters: 50,
            mode: ProposalMode::MeanOnly,
            estimator: Estimator::Mixture,
            ci_level: 0.95,
            seed: 1,
        }
    }

    /// `tau = 10` and `L = 500`.
    pub fn estimation() -> Self {
        Self {
            name: "estimation".into(),
            tau: 10.0,
            chains: 500,
            ..Self::base()
        }
    }

    /// Chains only at `phi_tilde`, Bayes factors by the simplified
    /// estimator.
    pub fn simplified(phi_tilde: f64) -> Self {
        Self {
            name: format!("simplified_{phi_tilde}"),
            coarse: vec![phi_tilde],
            reference: phi_tilde,
            estimator: Estimator::Simplified,
            ..Self::estimation()
        }
    }

    pub fn long_run() -> Self {
        Self {
            name: "long_run".into(),
            t_max: 1000,
            ci_level: 0.99,
            ..Self::estimation()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 || self.t_max == 0 {
            return Err(Error::Config("scenario needs at least one site and one time step".into()));
        }
        if !(self.sigma2 >= 0.0) || !(self.phi > 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("scenario needs sigma2 >= 0, phi > 0 and tau > 0".into()));
        }
        if self.prior.dim() != 1 {
            return Err(Error::Config("scenario designs are intercept-only; b0 must have length 1".into()));
        }
        self.grid()?;
        Ok(())
    }

    pub fn sites(&self) -> SiteSet {
        SiteSet::equispaced(self.n_sites, 0.0, 1.0)
    }

    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_element(self.n_sites, 1, 1.0)
    }

    pub fn truth(&self) -> Theta {
        Theta::new(self.alpha, vec![self.beta], self.sigma2)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(
            self.fine.clone(),
            &self.coarse,
            self.reference,
            vec![self.chains; self.coarse.len()],
        )
    }

    pub fn engine_setup(&self) -> Result<EngineSetup> {
        Ok(EngineSetup {
            sites: self.sites(),
            kernel: CorrelationKernel::exponential(self.phi)?,
            model: ObservationModel::new(self.family),
            prior: self.prior.clone(),
            grid: self.grid()?,
            filter: FilterSettings {
                n_particles: self.particles,
                gibbs_iters: self.gibbs_iters,
                mode: self.mode,
                newton: NewtonSettings::default(),
            },
            estimator: self.estimator,
            ci_level: self.ci_level,
            ess_floor: 10.0,
            init: InitMethod::FirstObservation,
            seed: self.seed,
        })
    }

    /// Dataset for this scenario's seed.
    pub fn generate(&self) -> Result<SimData> {
        simulate(self, &mut stream(self.seed, &[2]))
    }

    /// Named presets: `base`, `estimation`, `long_run` and
    /// `simplified_<phi>`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "estimation" => Ok(Self::estimation()),
            "long_run" => Ok(Self::long_run()),
            _ => match name.strip_prefix("simplified_").map(str::parse::<f64>) {
                Some(Ok(phi)) => Ok(Self::simplified(phi)),
                _ => Err(Error::Config(format!(
                    "unknown scenario `{name}` (expected base, estimation, long_run or simplified_<phi>)"
                ))),
            },
        }
    }

    /// Site ids `S01, S02, ...`.
    pub fn site_ids(&self) -> Vec<String> {
        (1..=self.n_sites).map(|i| format!("S{i:02}")).collect()
    }

    /// Run configuration equivalent to [`Scenario::engine_setup`].
    pub fn run_config(&self) -> RunConfig {
        let mut c = RunConfig::default();
        c.seed = self.seed;
        c.model.family = self.family;
        c.prior.a0 = self.prior.a0;
        c.prior.s0 = self.prior.s0;
        c.prior.b0 = Some(self.prior.b0.clone());
        c.prior.q0 = self.prior.q0;
        c.prior.c0 = self.prior.c0;
        c.prior.r0 = self.prior.r0;
        let (lo, hi, n) = (self.fine[0], self.fine[self.fine.len() - 1], self.fine.len());
        if self.fine == GridSpec::linspace(lo, hi, n) {
            (c.grid.fine_min, c.grid.fine_max, c.grid.fine_count) = (lo, hi, n);
        } else {
            c.grid.fine = Some(self.fine.clone());
        }
        c.grid.coarse = self.coarse.clone();
        c.grid.reference = Some(self.reference);
        c.monte_carlo.chains = self.chains;
        c.monte_carlo.particles = self.particles;
        c.monte_carlo.gibbs_iters = self.gibbs_iters;
        c.proposal.mode = self.mode;
        c.estimation.estimator = self.estimator;
        c.estimation.ci_level = self.ci_level;
        c
    }
}

/// `x[t]` for `t = 0..=T`, `y[t - 1]` for `t = 1..=T`, `g[t]` for
/// `t = 0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimData {
    pub x: Vec<DVector<f64>>,
    pub y: Vec<ObsBatch>,
    pub g: Vec<DMatrix<f64>>,
}

impl SimData {
    /// Observations as CSV rows; day `t` holds `y_t`.
    pub fn records(&self, sc: &Scenario) -> Vec<ObservationRecord> {
        let ids = sc.site_ids();
        let sites = sc.sites();
        let mut out = Vec::new();
        for (t, b) in self.y.iter().enumerate() {
            for i in 0..b.len() {
                if b.observed[i] {
                    out.push(ObservationRecord {
                        day: t as i64 + 1,
                        site: ids[i].clone(),
                        coord_x: sites.coords()[i][0],
                        coord_y: sites.coords()[i][1],
                        count: b.y[i],
                        exposure: b.tau[i],
                    });
                }
            }
        }
        out
    }
}

pub fn simulate<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<SimData> {
    scenario.validate()?;
    let sites = scenario.sites();
    let r = build_correlation(&sites, &CorrelationKernel::exponential(scenario.phi)?)?;
    let fac = GaussianFactorization::new(&r)?;
    let g = scenario.design();
    let mean = &g * DVector::from_element(1, scenario.beta);
    let n = scenario.n_sites;
    let mut x = Vec::with_capacity(scenario.t_max + 1);
    x.push(mvn_sample(&mean, scenario.sigma2, &fac, rng)?);
    let mut y = Vec::with_capacity(scenario.t_max);
    for t in 1..=scenario.t_max {
        let m = &mean + (&x[t - 1] - &mean) * scenario.alpha;
        let xt = mvn_sample(&m, scenario.sigma2, &fac, rng)?;
        let yt: Vec<f64> = (0..n).map(|i| scenario.family.sample(scenario.tau, xt[i], rng)).collect();
        y.push(ObsBatch::full(yt, vec![scenario.tau; n]));
        x.push(xt);
    }
    Ok(SimData {
        x,
        y,
        g: vec![g; scenario.t_max + 1],
    })
}

/// Runs the online estimator over the first `t_max` steps of `data`.
pub fn run_online(setup: EngineSetup, data: &SimData, t_max: usize) -> Result<Vec<StepReport>> {
    let mut engine = Engine::new(setup, data.g[0].clone())?;
    let mut out = Vec::with_capacity(t_max);
    for t in 1..=t_max.min(data.y.len()) {
        out.push(engine.advance(&data.y[t - 1], &data.g[t])?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// synthetic monitoring data

/// Generator for count data in the observation CSV schema: planar sites
/// around a source at the origin, covariates `[1, distance, t]`, repeat
/// samples on some days and missing site-days.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoringScenario {
    pub n_sites: usize,
    pub n_days: usize,
    /// Sites are drawn uniformly in `[-extent, extent]^2`.
    pub extent: f64,
    pub alpha: f64,
    pub beta: [f64; 3],
    pub sigma2: f64,
    pub phi: f64,
    /// Probability that a site is not visited on a day.
    pub missing: f64,
    /// Probability that a visited site is sampled twice.
    pub repeat: f64,
    pub seed: u64,
}

impl Default for MonitoringScenario {
    fn default() -> Self {
        Self {
            n_sites: 17,
            n_days: 146,
            extent: 0.1,
            alpha: 0.8,
            beta: [4.0, -5.0, -0.004],
            sigma2: 0.5,
            phi: 0.05,
            missing: 0.15,
            repeat: 0.1,
            seed: 1,
        }
    }
}

impl MonitoringScenario {
    pub fn covariates(&self) -> CovariateSpec {
        CovariateSpec::distance_and_trend([0.0, 0.0])
    }

    /// Config matching the generator: fine grid with step 0.002 on
    /// `(0, 0.1]`, 7 coarse points, `c0 = r0 = 0.1`, chains seeded at the
    /// prior mode and 90% intervals.
    pub fn run_config(&self) -> RunConfig {
        let mut c = RunConfig::default();
        c.seed = self.seed;
        c.model.covariates = self.covariates();
        c.prior.b0 = Some(vec![0.0; 3]);
        c.prior.c0 = 0.1;
        c.prior.r0 = 0.1;
        c.monte_carlo.init = InitMethod::PriorMode;
        c.estimation.ci_level = 0.9;
        c.grid.fine = Some(GridSpec::linspace(0.002, 0.1, 50));
        c.grid.coarse = GridSpec::linspace(0.002, 0.098, 7);
        c.grid.reference = None;
        c.monte_carlo.chains = 500;
        c.monte_carlo.particles = 1000;
        c.monte_carlo.gibbs_iters = 100;
        c
    }

    /// Observation rows, days `1..=n_days`, in day order.
    pub fn generate(&self) -> Result<Vec<ObservationRecord>> {
        let rng = &mut stream(self.seed, &[4]);
        let coords: Vec<[f64; 2]> = (0..self.n_sites)
            .map(|_| [rng.random_range(-self.extent..self.extent), rng.random_range(-self.extent..self.extent)])
            .collect();
        let sites = SiteSet::planar(coords.clone());
        let fac = GaussianFactorization::new(&build_correlation(&sites, &CorrelationKernel::exponential(self.phi)?)?)?;
        let spec = self.covariates();
        let beta = DVector::from_row_slice(&self.beta);
        let mut prev_mean = spec.design(&sites, 0) * &beta;
        let mut x = mvn_sample(&prev_mean, self.sigma2, &fac, rng)?;
        let mut out = Vec::new();
        for day in 1..=self.n_days {
            let mean = spec.design(&sites, day) * &beta;
            let m = &mean + (&x - &prev_mean) * self.alpha;
            x = mvn_sample(&m, self.sigma2, &fac, rng)?;
            prev_mean = mean;
            let mut visited = 0;
            for i in 0..self.n_sites {
                let last = i + 1 == self.n_sites && visited == 0;
                if !last && rng.random::<f64>() < self.missing {
                    continue;
                }
                visited += 1;
                let reps = if rng.random::<f64>() < self.repeat { 2 } else { 1 };
                for _ in 0..reps {
                    out.push(ObservationRecord {
                        day: day as i64,
                        site: format!("S{:02}", i + 1),
                        coord_x: coords[i][0],
                        coord_y: coords[i][1],
                        count: Family::Poisson.sample(1.0, x[i], rng),
                        exposure: 1.0,
                    });
                }
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------
// quadrature oracle

/// Largest `n T + 2` the oracle accepts.
pub const ORACLE_MAX_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerIntegral {
    /// Gauss-Hermite rule centred at the mode of the latent integrand and
    /// scaled by its curvature.
    LaplaceHermite,
    /// Exact Kalman filter over `(x_t, beta)`; Gaussian family only.
    Kalman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    /// Gauss-Hermite nodes per latent coordinate.
    pub nodes: usize,
    /// Trapezoid step in `log sigma2`.
    pub u_step: f64,
    /// Trapezoid step in `v`, where `alpha = mode + scale sinh(v)` and
    /// `scale` is the local curvature scale.
    pub alpha_step: f64,
    /// Sums stop once the log-integrand is this far below its maximum.
    pub drop: f64,
    pub inner: InnerIntegral,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            nodes: 16,
            u_step: 0.25,
            alpha_step: 0.125,
            drop: 25.0,
            inner: InnerIntegral::LaplaceHermite,
        }
    }
}

impl OracleSpec {
    /// Twice the nodes and half the steps.
    pub fn refined(&self) -> Self {
        Self {
            nodes: 2 * self.nodes,
            u_step: 0.5 * self.u_step,
            alpha_step: 0.5 * self.alpha_step,
            ..*self
        }
    }
}

/// Observed coordinates of `x_{1:T}` with `beta` and `x_0` integrated out
/// in closed form.
struct Collapsed<'a> {
    obs: Vec<(usize, usize)>,
    y: Vec<f64>,
    tau: Vec<f64>,
    mean: DVector<f64>,
    r: DMatrix<f64>,
    gg: DMatrix<f64>,
    family: Family,
    problem: &'a OfflineProblem<'a>,
    phi: f64,
}

impl<'a> Collapsed<'a> {
    fn new(problem: &'a OfflineProblem<'a>, phi: f64) -> Result<Self> {
        let prior = problem.prior;
        let mut obs = Vec::new();
        let (mut y, mut tau) = (Vec::new(), Vec::new());
        for (t, b) in problem.ys.iter().enumerate() {
            for i in 0..b.len() {
                if b.observed[i] {
                    obs.push((t + 1, i));
                    y.push(b.y[i]);
                    tau.push(b.tau[i]);
                }
            }
        }
        let d = obs.len();
        let mb = prior.beta_prior_mean();
        let row = |t: usize, i: usize| problem.gs[t].row(i).transpose();
        let mean = DVector::from_fn(d, |a, _| {
            let (t, i) = obs[a];
            row(t, i).dot(&mb)
        });
        let rfull = build_correlation(problem.sites, &problem.kernel.with_range(phi)?)?;
        let r = DMatrix::from_fn(d, d, |a, b| rfull[(obs[a].1, obs[b].1)]);
        let gg = DMatrix::from_fn(d, d, |a, b| row(obs[a].0, obs[a].1).dot(&row(obs[b].0, obs[b].1)) / prior.q0);
        Ok(Self {
            obs,
            y,
            tau,
            mean,
            r,
            gg,
            family: problem.model.family,
            problem,
            phi,
        })
    }

    /// `Cov(x_{1:T}) / sigma2` on the observed coordinates.
    fn scaled_cov(&self, alpha: f64) -> DMatrix<f64> {
        let d = self.obs.len();
        DMatrix::from_fn(d, d, |a, b| {
            let (s, t) = (self.obs[a].0, self.obs[b].0);
            let m = s.min(t);
            let v: f64 = (0..=m).map(|j| alpha.powi(2 * j as i32)).sum();
            alpha.powi((s as i32 - t as i32).abs()) * v * self.r[(a, b)] + self.gg[(a, b)]
        })
    }

    fn obs_loglik(&self, x: &DVector<f64>) -> f64 {
        (0..x.len()).map(|k| self.family.log_density(self.y[k], self.tau[k], x[k])).sum()
    }

    /// `log p(y | alpha, sigma2)` by Laplace-centred Gauss-Hermite.
    fn inner_hermite(&self, alpha: f64, sigma2: f64, nodes: usize) -> Result<f64> {
        let d = self.obs.len();
        let s = self.scaled_cov(alpha) * sigma2;
        let sfac = GaussianFactorization::new(&s)?;
        let p = sfac.solve_matrix(&DMatrix::identity(d, d));
        let log_prior =
            |x: &DVector<f64>| -0.5 * d as f64 * LN_2PI - 0.5 * sfac.log_det() - 0.5 * sfac.quad_form(&(x - &self.mean));
        let f = |x: &DVector<f64>| log_prior(x) + self.obs_loglik(x);

        let mut x = self.mean.clone();
        let mut fx = f(&x);
        let mut hess = p.clone();
        for _ in 0..100 {
            let mut grad = -(&p * (&x - &self.mean));
            hess.copy_from(&p);
            for k in 0..d {
                let dv = self.family.neg_kernel_derivs(self.y[k], self.tau[k], x[k]);
                grad[k] -= dv[1];
                hess[(k, k)] += dv[2];
            }
            let step = GaussianFactorization::new(&hess)?.solve(&grad);
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let xn = &x + &step * lambda;
                let fnew = f(&xn);
                if fnew >= fx - 1e-13 * (1.0 + fx.abs()) {
                    x = xn;
                    fx = fnew;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted || step.amax() * lambda < 1e-12 {
                break;
            }
        }
        for k in 0..d {
            hess[(k, k)] = p[(k, k)] + self.family.neg_kernel_derivs(self.y[k], self.tau[k], x[k])[2];
        }
        for a in 0..d {
            for b in 0..d {
                if a != b {
                    hess[(a, b)] = p[(a, b)];
                }
            }
        }
        let hf = GaussianFactorization::new(&hess)?;
        // x = x_hat + B z with B = U^{-T} and H = U U^T
        let b = hf
            .lower()
            .transpose()
            .try_inverse()
            .ok_or_else(|| Error::Domain("singular curvature".into()))?;
        let r_hat = &x - &self.mean;
        let lin = b.transpose() * (&p * &r_hat);
        let quad = b.transpose() * &p * &b;
        let c0 = r_hat.dot(&(&p * &r_hat));
        let obs_const: Vec<f64> = (0..d)
            .map(|k| self.family.log_density(self.y[k], self.tau[k], 0.0) + self.tau[k] * self.family.b(0.0))
            .collect();
        let lp_const = -0.5 * d as f64 * LN_2PI - 0.5 * sfac.log_det() + obs_const.iter().sum::<f64>();
        let mut bb = [[0.0; 4]; 4];
        let mut qq = [[0.0; 4]; 4];
        let (mut ll, mut xh) = ([0.0; 4], [0.0; 4]);
        for a in 0..d {
            ll[a] = lin[a];
            xh[a] = x[a];
            for c in 0..d {
                bb[a][c] = b[(a, c)];
                qq[a][c] = quad[(a, c)];
            }
        }
        let (yk, tk) = (&self.y, &self.tau);
        let fam = self.family;
        let rule = gauss_hermite_prob(nodes);
        let ln_w: Vec<f64> = rule.weights.iter().map(|w| w.ln()).collect();
        let lw_max = ln_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * d as f64;
        let total = nodes.pow(d as u32);
        let mut acc = 0.0;
        let mut z = [0.0; 4];
        for flat in 0..total {
            let mut rem = flat;
            let mut lw = 0.0;
            for zk in z.iter_mut().take(d) {
                let i = rem % nodes;
                rem /= nodes;
                *zk = rule.nodes[i];
                lw += ln_w[i];
            }
            if lw < lw_max - HERMITE_PRUNE {
                continue;
            }
            let mut q = c0;
            let mut zz = 0.0;
            let mut obs = 0.0;
            for a in 0..d {
                zz += z[a] * z[a];
                let mut qa = 2.0 * ll[a];
                let mut xa = xh[a];
                for c in 0..d {
                    qa += qq[a][c] * z[c];
                    xa += bb[a][c] * z[c];
                }
                q += qa * z[a];
                obs += yk[a] * fam.g(xa) - tk[a] * fam.b(xa);
            }
            let fz = lp_const - 0.5 * q + obs;
            acc += (lw + fz - fx + 0.5 * zz).exp();
        }
        Ok(fx - 0.5 * hf.log_det() + acc.ln())
    }

    /// `log p(y | alpha, sigma2)` by a Kalman filter over `(x_t, beta)`.
    fn inner_kalman(&self, alpha: f64, sigma2: f64) -> Result<f64> {
        if self.family != Family::Gaussian {
            return Err(Error::Config("the Kalman route needs the Gaussian family".into()));
        }
        let pr = self.problem;
        let n = pr.sites.len();
        let m = pr.prior.dim();
        let dim = n + m;
        let r = build_correlation(pr.sites, &pr.kernel.with_range(self.phi)?)?;
        let vb = DMatrix::identity(m, m) * (sigma2 / pr.prior.q0);
        let mb = pr.prior.beta_prior_mean();
        let g0 = &pr.gs[0];
        let mut mean = DVector::zeros(dim);
        mean.rows_mut(0, n).copy_from(&(g0 * &mb));
        mean.rows_mut(n, m).copy_from(&mb);
        let mut cov = DMatrix::zeros(dim, dim);
        cov.view_mut((0, 0), (n, n)).copy_from(&(g0 * &vb * g0.transpose() + &r * sigma2));
        cov.view_mut((0, n), (n, m)).copy_from(&(g0 * &vb));
        cov.view_mut((n, 0), (m, n)).copy_from(&(&vb * g0.transpose()));
        cov.view_mut((n, n), (m, m)).copy_from(&vb);
        let mut ll = 0.0;
        for t in 1..pr.gs.len() {
            let mut f = DMatrix::identity(dim, dim);
            f.view_mut((0, 0), (n, n)).fill_diagonal(alpha);
            f.view_mut((0, n), (n, m)).copy_from(&(&pr.gs[t] - &pr.gs[t - 1] * alpha));
            mean = &f * &mean;
            cov = &f * &cov * f.transpose();
            let mut q = cov.view_mut((0, 0), (n, n));
            q += &r * sigma2;
            let b = &pr.ys[t - 1];
            let rows: Vec<usize> = (0..n).filter(|&i| b.observed[i]).collect();
            if rows.is_empty() {
                continue;
            }
            let k = rows.len();
            let h = DMatrix::from_fn(k, dim, |a, c| if c == rows[a] { b.tau[rows[a]] } else { 0.0 });
            let yv = DVector::from_fn(k, |a, _| b.y[rows[a]]);
            let s = &h * &cov * h.transpose() + DMatrix::from_fn(k, k, |a, c| if a == c { b.tau[rows[a]] } else { 0.0 });
            let sf = GaussianFactorization::new(&s)?;
            let resid = &yv - &h * &mean;
            ll += -0.5 * k as f64 * LN_2PI - 0.5 * sf.log_det() - 0.5 * sf.quad_form(&resid);
            let gain = sf.solve_matrix(&(&h * &cov)).transpose();
            mean += &gain * resid;
            cov = &cov - &gain * &h * &cov;
            cov = (&cov + cov.transpose()) * 0.5;
        }
        Ok(ll)
    }
}

/// Hermite tensor nodes whose weight product falls this far (in logs)
/// below the largest are skipped.
const HERMITE_PRUNE: f64 = 46.0;

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log p(y_{1:T} | alpha, sigma2, phi)` with `x_{0:T}` and `beta`
/// integrated out.
pub fn oracle_conditional_loglik(
    problem: &OfflineProblem,
    phi: f64,
    alpha: f64,
    sigma2: f64,
    spec: &OracleSpec,
) -> Result<f64> {
    let c = oracle_guard(problem, phi)?;
    match c {
        None => Ok(0.0),
        Some(c) => match spec.inner {
            InnerIntegral::LaplaceHermite => c.inner_hermite(alpha, sigma2, spec.nodes),
            InnerIntegral::Kalman => c.inner_kalman(alpha, sigma2),
        },
    }
}

fn oracle_guard<'a>(problem: &'a OfflineProblem<'a>, phi: f64) -> Result<Option<Collapsed<'a>>> {
    let n = problem.sites.len();
    let t = problem.ys.len();
    if n * t + 2 > ORACLE_MAX_DIM {
        return Err(Error::Dimension(format!(
            "quadrature oracle limited to n T + 2 <= {ORACLE_MAX_DIM}, got {}",
            n * t + 2
        )));
    }
    if problem.gs.len() != t + 1 {
        return Err(Error::Dimension("need T + 1 design matrices".into()));
    }
    let prior = problem.prior;
    prior.validate()?;
    if !(prior.q0 > 0.0 && prior.s0 > 0.0) {
        return Err(Error::Config("the oracle needs proper priors (q0 > 0, s0 > 0)".into()));
    }
    if problem.ys.iter().all(|b| b.n_observed() == 0) {
        return Ok(None);
    }
    Ok(Some(Collapsed::new(problem, phi)?))
}

/// `log` of the trapezoid sum `h * sum_j exp(g(centre + j h))`, walking
/// outward on both sides until `g` has fallen `drop` below the largest
/// value seen and is still decreasing.
fn trapezoid_walk<G: FnMut(f64) -> f64>(mut g: G, centre: f64, h: f64, drop: f64, max_steps: usize) -> f64 {
    let g0 = g(centre);
    let mut vals = vec![g0];
    let mut gmax = g0;
    for dir in [-1.0, 1.0] {
        let mut prev = g0;
        for j in 1..=max_steps {
            let v = g(centre + dir * j as f64 * h);
            vals.push(v);
            gmax = gmax.max(v);
            if v < gmax - drop && v <= prev {
                break;
            }
            prev = v;
        }
    }
    log_sum_exp(&vals) + h.ln()
}

/// Approximate maximizer and curvature scale of a smooth unimodal `g` by
/// damped Newton steps on central differences.
fn mode_and_scale<G: FnMut(f64) -> f64>(mut g: G, start: f64, scale: f64) -> (f64, f64) {
    let mut a = start;
    let mut s = scale;
    for _ in 0..12 {
        let e = 1e-3 * s;
        let (gm, g0, gp) = (g(a - e), g(a), g(a + e));
        let d1 = (gp - gm) / (2.0 * e);
        let d2 = (gp - 2.0 * g0 + gm) / (e * e);
        if !(d1.is_finite() && d2.is_finite()) {
            break;
        }
        let step = if d2 < 0.0 {
            s = (-1.0 / d2).sqrt();
            -d1 / d2
        } else {
            d1.signum() * s
        };
        let step = step.clamp(-3.0 * s, 3.0 * s);
        a += step;
        if step.abs() < 1e-4 * s {
            break;
        }
    }
    (a, s)
}

/// `log p(y_{1:T} | phi)` with every other unknown integrated out:
/// `x_0` and `beta` in closed form, `x_{1:T}` by [`InnerIntegral`], and
/// `(alpha, log sigma2)` by nested trapezoid sums centred at the
/// conditional modes.
pub fn oracle_marginal_loglik(problem: &OfflineProblem, phi: f64, spec: &OracleSpec) -> Result<f64> {
    let Some(c) = oracle_guard(problem, phi)? else {
        return Ok(0.0);
    };
    let prior = problem.prior;
    let inner = |alpha: f64, s2: f64| -> f64 {
        let v = match spec.inner {
            InnerIntegral::LaplaceHermite => c.inner_hermite(alpha, s2, spec.nodes),
            InnerIntegral::Kalman => c.inner_kalman(alpha, s2),
        };
        v.unwrap_or(f64::NEG_INFINITY)
    };
    let (shape, rate) = (0.5 * prior.c0, 0.5 * prior.r0);
    let mu_a = prior.alpha_prior_mean();
    let ln_norm = -0.5 * LN_2PI;
    let mut alpha_start = mu_a;
    // log of the alpha integral at u = log sigma2, plus the prior of u
    let mut per_u = |u: f64| -> f64 {
        let s2 = u.exp();
        let lp_u = shape * rate.ln() - ln_gamma(shape) - shape * u - rate / s2;
        let sd_a = (s2 / prior.s0).sqrt();
        let g = |a: f64| {
            let z = (a - mu_a) / sd_a;
            inner(a, s2) + ln_norm - sd_a.ln() - 0.5 * z * z
        };
        let (mode, scale) = mode_and_scale(g, alpha_start, sd_a.min(1.0));
        alpha_start = mode;
        // alpha = mode + scale sinh(v) turns polynomial tails into
        // exponential ones
        let gv = |v: f64| g(mode + scale * v.sinh()) + (scale * v.cosh()).ln();
        lp_u + trapezoid_walk(gv, 0.0, spec.alpha_step, spec.drop, 400)
    };
    let u0 = (rate / shape).ln();
    let out = trapezoid_walk(&mut per_u, u0, spec.u_step, spec.drop, 400);
    if !out.is_finite() {
        return Err(Error::NonConvergence {
            iterations: 0,
            grad_norm: f64::NAN,
            last_iterate: vec![phi],
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// replication studies

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    EssComparison,
    Estimation,
    SimplifiedBias,
    LongRun,
}

impl Study {
    pub const ALL: [Study; 4] = [Study::EssComparison, Study::Estimation, Study::SimplifiedBias, Study::LongRun];

    pub fn as_str(self) -> &'static str {
        match self {
            Study::EssComparison => "ess_comparison",
            Study::Estimation => "estimation",
            Study::SimplifiedBias => "simplified_bias",
            Study::LongRun => "long_run",
        }
    }

    /// Replications at desk scale and with `--full`.
    pub fn replications(self, full: bool) -> usize {
        match (self, full) {
            (Study::LongRun, _) => 1,
            (Study::Estimation, true) => 100,
            (_, true) => 30,
            (_, false) => 10,
        }
    }
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Study {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Study::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown study `{s}` (expected one of ess_comparison, estimation, simplified_bias, long_run)")))
    }
}

/// A CSV-shaped table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Self {
            name: name.into(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push<I: IntoIterator<Item = String>>(&mut self, row: I) {
        self.rows.push(row.into_iter().collect());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: Study,
    pub seeds: Vec<u64>,
    pub full: bool,
    pub tables: Vec<Table>,
}

/// Proposal ESS per step, one record per (replication, mode, t).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssRecord {
    pub seed: u64,
    pub mode: ProposalMode,
    pub t: usize,
    pub ess_fraction: f64,
    pub delta_sq_mean: f64,
    pub delta_sq_max: f64,
}

pub fn ess_comparison(base: &Scenario, seeds: &[u64], modes: &[ProposalMode]) -> Result<Vec<EssRecord>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let sc = base.clone().with_seed(seed);
        let data = sc.generate()?;
        for &mode in modes {
            let mut setup = sc.engine_setup()?;
            setup.filter.mode = mode;
            for r in run_online(setup, &data, sc.t_max)? {
                out.push(EssRecord {
                    seed,
                    mode,
                    t: r.t,
                    ess_fraction: r.mean_ess / sc.particles as f64,
                    delta_sq_mean: r.delta_sq_mean,
                    delta_sq_max: r.delta_sq_max,
                });
            }
        }
    }
    Ok(out)
}

fn theta_cells(th: &Theta) -> Vec<String> {
    let mut v = vec![th.alpha.to_string()];
    v.extend(th.beta.iter().map(|b| b.to_string()));
    v.push(th.sigma2.to_string());
    v
}

/// Posterior means of `(alpha, beta, sigma2, phi)` from offline output.
pub fn offline_means(out: &McmcOutput) -> [f64; 4] {
    let n = out.samples.len() as f64;
    let mut m = [0.0; 4];
    for s in &out.samples {
        m[0] += s.theta.alpha;
        m[1] += s.theta.beta[0];
        m[2] += s.theta.sigma2;
        m[3] += s.phi;
    }
    m.map(|v| v / n)
}

/// Offline posterior for the first `t` steps of a scenario's data.
pub fn offline_fit(sc: &Scenario, data: &SimData, t: usize, config: &McmcConfig, seed: u64) -> Result<McmcOutput> {
    let sites = sc.sites();
    let kernel = CorrelationKernel::exponential(sc.phi)?;
    let model = ObservationModel::new(sc.family);
    let problem = OfflineProblem {
        sites: &sites,
        kernel: &kernel,
        model: &model,
        prior: &sc.prior,
        ys: &data.y[..t],
        gs: &data.g[..=t],
    };
    run_offline(&problem, config, &mut stream(seed, &[3, t as u64]))
}

fn trajectory_table(name: &str, runs: &[(u64, Vec<StepReport>)]) -> Table {
    let mut tab = Table::new(
        name,
        &["seed", "t", "alpha", "beta", "sigma2", "phi", "ci_lower", "ci_upper", "mean_ess", "step_seconds"],
    );
    for (seed, reports) in runs {
        for r in reports {
            let mut row = vec![seed.to_string(), r.t.to_string()];
            row.extend(theta_cells(&r.theta_hat));
            row.extend([r.phi_hat, r.ci_lower, r.ci_upper, r.mean_ess, r.step_seconds].map(|v| v.to_string()));
            tab.push(row);
        }
    }
    tab
}

fn mean_curve_table(name: &str, arms: &[(String, Vec<Vec<StepReport>>)]) -> Table {
    let mut tab = Table::new(name, &["arm", "t", "alpha", "beta", "sigma2", "phi"]);
    for (arm, runs) in arms {
        let t_max = runs.iter().map(|r| r.len()).min().unwrap_or(0);
        for t in 0..t_max {
            let k = runs.len() as f64;
            let mut m = [0.0; 4];
            for r in runs {
                m[0] += r[t].theta_hat.alpha / k;
                m[1] += r[t].theta_hat.beta[0] / k;
                m[2] += r[t].theta_hat.sigma2 / k;
                m[3] += r[t].phi_hat / k;
            }
            let mut row = vec![arm.clone(), (t + 1).to_string()];
            row.extend(m.map(|v| v.to_string()));
            tab.push(row);
        }
    }
    tab
}

/// Runs a study and returns its tables. `full` selects the larger
/// replication counts.
pub fn replicate_study(study: Study, seeds: &[u64], full: bool) -> Result<StudyReport> {
    let mut tables = Vec::new();
    let offline_cfg = McmcConfig::default();
    match study {
        Study::EssComparison => {
            let modes = [ProposalMode::Gaussian, ProposalMode::MeanOnly, ProposalMode::MeanSkew];
            let recs = ess_comparison(&Scenario::base(), seeds, &modes)?;
            let mut tab = Table::new(
                "ess_by_proposal",
                &["seed", "proposal", "t", "ess_fraction", "delta_sq_mean", "delta_sq_max"],
            );
            for r in &recs {
                tab.push([
                    r.seed.to_string(),
                    r.mode.to_string(),
                    r.t.to_string(),
                    r.ess_fraction.to_string(),
                    r.delta_sq_mean.to_string(),
                    r.delta_sq_max.to_string(),
                ]);
            }
            tables.push(tab);
        }
        Study::Estimation => {
            let base = Scenario::estimation();
            let times = [20, 40, 60, 80, 100];
            let n_offline = if full { 30 } else { seeds.len() };
            let mut runs = Vec::new();
            let mut boxes = Table::new("offline_estimates", &["seed", "t", "alpha", "beta", "sigma2", "phi"]);
            for (r, &seed) in seeds.iter().enumerate() {
                let sc = base.clone().with_seed(seed);
                let data = sc.generate()?;
                runs.push((seed, run_online(sc.engine_setup()?, &data, sc.t_max)?));
                if r < n_offline {
                    for &t in &times {
                        let m = offline_means(&offline_fit(&sc, &data, t, &offline_cfg, seed)?);
                        let mut row = vec![seed.to_string(), t.to_string()];
                        row.extend(m.map(|v| v.to_string()));
                        boxes.push(row);
                    }
                }
            }
            tables.push(trajectory_table("online_trajectories", &runs));
            let arms = vec![("mixture".to_string(), runs.into_iter().map(|r| r.1).collect())];
            tables.push(mean_curve_table("online_mean", &arms));
            tables.push(boxes);
        }
        Study::SimplifiedBias => {
            let mut arms: Vec<(String, Scenario)> = vec![("mixture".into(), Scenario::estimation())];
            for pt in [0.395, 0.500, 0.710] {
                arms.push((format!("simplified_{pt:.3}"), Scenario::simplified(pt)));
            }
            let mut curves = Vec::new();
            for (name, sc) in &arms {
                let mut runs = Vec::new();
                for &seed in seeds {
                    let s = sc.clone().with_seed(seed);
                    // the dataset depends on the seed only
                    let data = Scenario::estimation().with_seed(seed).generate()?;
                    runs.push(run_online(s.engine_setup()?, &data, s.t_max)?);
                }
                curves.push((name.clone(), runs));
            }
            tables.push(mean_curve_table("mean_estimates_by_arm", &curves));
        }
        Study::LongRun => {
            let seed = seeds.first().copied().unwrap_or(1);
            let sc = Scenario::long_run().with_seed(seed);
            let data = sc.generate()?;
            let reports = run_online(sc.engine_setup()?, &data, sc.t_max)?;
            let mut bf = Table::new("log_bayes_factor", &["t", "phi", "log_bf"]);
            for r in reports.iter().filter(|r| r.t % 100 == 0 || r.t == 10 || r.t == 50) {
                for (phi, v) in sc.fine.iter().zip(&r.log_bf) {
                    bf.push([r.t.to_string(), phi.to_string(), v.to_string()]);
                }
            }
            tables.push(trajectory_table("online_trajectory", &[(seed, reports)]));
            tables.push(bf);
            let times: Vec<usize> = if full {
                (1..=10).map(|k| 100 * k).collect()
            } else {
                vec![100, 500, 1000]
            };
            let cfg = if full {
                offline_cfg.clone()
            } else {
                McmcConfig {
                    n_samples: 1000,
                    ..offline_cfg.clone()
                }
            };
            let mut off = Table::new(
                "offline_summary",
                &["t", "parameter", "mean", "q005", "q995"],
            );
            for t in times {
                let out = offline_fit(&sc, &data, t, &cfg, seed)?;
                let cols: [(&str, Vec<f64>); 4] = [
                    ("alpha", out.column(|s| s.theta.alpha)),
                    ("beta", out.column(|s| s.theta.beta[0])),
                    ("sigma2", out.column(|s| s.theta.sigma2)),
                    ("phi", out.column(|s| s.phi)),
                ];
                for (name, mut v) in cols {
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    v.sort_by(f64::total_cmp);
                    off.push([
                        t.to_string(),
                        name.to_string(),
                        m.to_string(),
                        quantile_sorted(&v, 0.005).to_string(),
                        quantile_sorted(&v, 0.995).to_string(),
                    ]);
                }
            }
            tables.push(off);
        }
    }
    Ok(StudyReport {
        study,
        seeds: seeds.to_vec(),
        full,
        tables,
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}
