//! Fixed-size sufficient statistics for the autoregressive state equation
//! and the conjugate Gibbs updates for `theta = (alpha, beta, sigma2)`.
//!
//! All accumulators are stored free of `alpha` and `beta` and combined at
//! query time, so a chain can resample `theta` every step without touching
//! its history.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::spatial::{RangeFactor, LN_2PI};
use crate::{Error, Result};

/// Conjugate prior hyperparameters.
///
/// `beta | sigma2 ~ N(b0 / q0, sigma2 / q0 I)`,
/// `alpha | sigma2 ~ N(a0 / s0, sigma2 / s0)`,
/// `sigma2 ~ IG(c0 / 2, r0 / 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorHyper {
    pub a0: f64,
    pub s0: f64,
    pub b0: Vec<f64>,
    pub q0: f64,
    pub c0: f64,
    pub r0: f64,
}

impl PriorHyper {
    /// `a0 = 0, s0 = 0.1, b0 = 0, q0 = 0.01, c0 = 3, r0 = 1/3`.
    pub fn default_for(m: usize) -> Self {
        Self {
            a0: 0.0,
            s0: 0.1,
            b0: vec![0.0; m],
            q0: 0.01,
            c0: 3.0,
            r0: 1.0 / 3.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.b0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s0 >= 0.0) || !(self.q0 >= 0.0) {
            return Err(Error::Config(format!(
                "prior precisions must be nonnegative (s0 = {}, q0 = {})",
                self.s0, self.q0
            )));
        }
        if !(self.c0 > 0.0) || !(self.r0 > 0.0) {
            return Err(Error::Config(format!(
                "inverse-gamma prior needs c0 > 0 and r0 > 0 (got {}, {})",
                self.c0, self.r0
            )));
        }
        if self.q0 == 0.0 && self.b0.iter().any(|&b| b != 0.0) {
            return Err(Error::Config("b0 must be zero when q0 = 0".into()));
        }
        if self.s0 == 0.0 && self.a0 != 0.0 {
            return Err(Error::Config("a0 must be zero when s0 = 0".into()));
        }
        Ok(())
    }

    pub fn beta_prior_mean(&self) -> DVector<f64> {
        if self.q0 > 0.0 {
            DVector::from_iterator(self.dim(), self.b0.iter().map(|b| b / self.q0))
        } else {
            DVector::zeros(self.dim())
        }
    }

    pub fn alpha_prior_mean(&self) -> f64 {
        if self.s0 > 0.0 {
            self.a0 / self.s0
        } else {
            0.0
        }
    }

    /// Number of prior dimensions scaled by `sigma2` (proper blocks only).
    fn scaled_prior_dims(&self) -> usize {
        (if self.q0 > 0.0 { self.dim() } else { 0 }) + usize::from(self.s0 > 0.0)
    }

    /// `(beta - mu)' Q0 (beta - mu)`.
    fn beta_prior_quad(&self, beta: &DVector<f64>) -> f64 {
        if self.q0 == 0.0 {
            return 0.0;
        }
        let mu = self.beta_prior_mean();
        self.q0 * (beta - mu).norm_squared()
    }

    /// `s0 (alpha - a0 / s0)^2`.
    fn alpha_prior_quad(&self, alpha: f64) -> f64 {
        if self.s0 == 0.0 {
            return 0.0;
        }
        let d = alpha - self.a0 / self.s0;
        self.s0 * d * d
    }
}

/// Temporal parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub alpha: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
}

impl Theta {
    pub fn new(alpha: f64, beta: Vec<f64>, sigma2: f64) -> Self {
        Self {
            alpha,
            beta: DVector::from_vec(beta),
            sigma2,
        }
    }

    /// Draw from the (proper) prior.
    pub fn sample_prior<R: Rng + ?Sized>(prior: &PriorHyper, rng: &mut R) -> Result<Self> {
        if !(prior.q0 > 0.0 && prior.s0 > 0.0) {
            return Err(Error::Config("drawing from the prior requires q0 > 0 and s0 > 0".into()));
        }
        let sigma2 = InverseGamma::new(0.5 * prior.c0, 0.5 * prior.r0)?.sample(rng);
        let alpha = prior.alpha_prior_mean() + (sigma2 / prior.s0).sqrt() * rng.sample::<f64, _>(StandardNormal);
        let sd = (sigma2 / prior.q0).sqrt();
        let beta = prior.beta_prior_mean().map(|mu| mu + sd * rng.sample::<f64, _>(StandardNormal));
        Ok(Self { alpha, beta, sigma2 })
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    #[inline]
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Column-major `rows x cols` block of compensated sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AccBlock {
    rows: usize,
    cols: usize,
    cells: Vec<Compensated>,
}

impl AccBlock {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            cells: vec![Compensated::default(); rows * cols],
        }
    }

    /// Adds `a' b` where `a` is `n x rows` and `b` is `n x cols` (column-major).
    fn add_cross(&mut self, a: &[f64], b: &[f64], n: usize) {
        for j in 0..self.cols {
            let bj = &b[j * n..(j + 1) * n];
            for i in 0..self.rows {
                let ai = &a[i * n..(i + 1) * n];
                let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                self.cells[j * self.rows + i].add(dot);
            }
        }
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(self.rows, self.cols, self.cells.iter().map(Compensated::value))
    }

    fn vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows * self.cols, self.cells.iter().map(Compensated::value))
    }

    fn scalar(&self) -> f64 {
        self.cells[0].value()
    }

    fn heap_bytes(&self) -> usize {
        self.cells.len() * std::mem::size_of::<Compensated>()
    }
}

/// Accumulated cross products of the state equation against `R(phi)^{-1}`.
///
/// Suffixes: `c` is time `s`, `p` is time `s - 1`; the `*0` fields hold the
/// time-0 terms. Sums run over `s = 1..t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSuffStats {
    phi: f64,
    log_det: f64,
    n: usize,
    m: usize,
    t: usize,
    gg0: AccBlock,
    gx0: AccBlock,
    xx0: AccBlock,
    gg_cc: AccBlock,
    gg_cp: AccBlock,
    gg_pp: AccBlock,
    gx_cc: AccBlock,
    gx_cp: AccBlock,
    gx_pc: AccBlock,
    gx_pp: AccBlock,
    xx_cc: AccBlock,
    xx_cp: AccBlock,
    xx_pp: AccBlock,
}

/// Normal full conditional of `beta`: mean `Q^{-1} b`, covariance
/// `sigma2 Q^{-1}`.
#[derive(Debug, Clone)]
pub struct BetaConditional {
    pub precision: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub mean: DVector<f64>,
    pub sigma2: f64,
    chol: DMatrix<f64>,
}

impl BetaConditional {
    pub fn cov(&self) -> DMatrix<f64> {
        let m = self.mean.len();
        let mut inv = DMatrix::identity(m, m);
        for col in inv.as_mut_slice().chunks_mut(m) {
            crate::spatial::forward_in_place(&self.chol, col);
            crate::spatial::backward_in_place(&self.chol, col);
        }
        inv * self.sigma2
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let m = self.mean.len();
        let mut z: Vec<f64> = (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        crate::spatial::backward_in_place(&self.chol, &mut z);
        let sd = self.sigma2.sqrt();
        DVector::from_iterator(m, self.mean.iter().zip(&z).map(|(mu, zi)| mu + sd * zi))
    }
}

/// Univariate normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normal1 {
    pub mean: f64,
    pub var: f64,
}

impl Normal1 {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.mean + self.var.sqrt() * rng.sample::<f64, _>(StandardNormal)
    }
}

/// `IG(shape, rate)`: density proportional to `v^{-shape-1} exp(-rate / v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGamma {
    pub shape: f64,
    pub rate: f64,
}

impl InverseGamma {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0) {
            return Err(Error::Numerical(format!(
                "inverse-gamma parameters must be positive (shape {shape}, rate {rate})"
            )));
        }
        Ok(Self { shape, rate })
    }

    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.rate / (self.shape - 1.0))
    }

    /// Mean of the precision `1 / v`.
    pub fn precision_mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.shape, 1.0 / self.rate).expect("validated parameters");
        1.0 / g.sample(rng)
    }
}

impl TemporalSuffStats {
    /// Statistics after observing `x_0` with covariates `G_0`.
    pub fn init(x0: &DVector<f64>, g0: &DMatrix<f64>, rf: &RangeFactor) -> Result<Self> {
        check_shapes(x0, g0, rf)?;
        let xw = rf.fac.whiten(x0);
        let gw = rf.fac.whiten_matrix(g0);
        Ok(Self::init_whitened(rf.phi, rf.fac.log_det(), xw.as_slice(), gw.as_slice(), g0.ncols()))
    }

    /// As [`init`](Self::init) with `L^{-1} x_0` and `L^{-1} G_0` supplied.
    pub fn init_whitened(phi: f64, log_det: f64, xw: &[f64], gw: &[f64], m: usize) -> Self {
        let n = xw.len();
        let mut s = Self {
            phi,
            log_det,
            n,
            m,
            t: 0,
            gg0: AccBlock::zeros(m, m),
            gx0: AccBlock::zeros(m, 1),
            xx0: AccBlock::zeros(1, 1),
            gg_cc: AccBlock::zeros(m, m),
            gg_cp: AccBlock::zeros(m, m),
            gg_pp: AccBlock::zeros(m, m),
            gx_cc: AccBlock::zeros(m, 1),
            gx_cp: AccBlock::zeros(m, 1),
            gx_pc: AccBlock::zeros(m, 1),
            gx_pp: AccBlock::zeros(m, 1),
            xx_cc: AccBlock::zeros(1, 1),
            xx_cp: AccBlock::zeros(1, 1),
            xx_pp: AccBlock::zeros(1, 1),
        };
        s.gg0.add_cross(gw, gw, n);
        s.gx0.add_cross(gw, xw, n);
        s.xx0.add_cross(xw, xw, n);
        s
    }

    /// Adds the time-`t` cross products.
    pub fn update(
        &mut self,
        x_t: &DVector<f64>,
        x_prev: &DVector<f64>,
        g_t: &DMatrix<f64>,
        g_prev: &DMatrix<f64>,
        rf: &RangeFactor,
    ) -> Result<()> {
        if rf.phi != self.phi {
            return Err(Error::Contract(format!(
                "statistics built for phi = {} updated with a factor for phi = {}",
                self.phi, rf.phi
            )));
        }
        check_shapes(x_t, g_t, rf)?;
        check_shapes(x_prev, g_prev, rf)?;
        if g_t.ncols() != self.m || g_prev.ncols() != self.m {
            return Err(Error::Dimension(format!("covariates must have {} columns", self.m)));
        }
        let xw = rf.fac.whiten(x_t);
        let xw_prev = rf.fac.whiten(x_prev);
        let gw = rf.fac.whiten_matrix(g_t);
        let gw_prev = rf.fac.whiten_matrix(g_prev);
        self.update_whitened(xw.as_slice(), xw_prev.as_slice(), gw.as_slice(), gw_prev.as_slice());
        Ok(())
    }

    /// As [`update`](Self::update) with every input already whitened.
    pub fn update_whitened(&mut self, xw: &[f64], xw_prev: &[f64], gw: &[f64], gw_prev: &[f64]) {
        let n = self.n;
        self.gg_cc.add_cross(gw, gw, n);
        self.gg_cp.add_cross(gw, gw_prev, n);
        self.gg_pp.add_cross(gw_prev, gw_prev, n);
        self.gx_cc.add_cross(gw, xw, n);
        self.gx_cp.add_cross(gw, xw_prev, n);
        self.gx_pc.add_cross(gw_prev, xw, n);
        self.gx_pp.add_cross(gw_prev, xw_prev, n);
        self.xx_cc.add_cross(xw, xw, n);
        self.xx_cp.add_cross(xw, xw_prev, n);
        self.xx_pp.add_cross(xw_prev, xw_prev, n);
        self.t += 1;
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    pub fn n_covariates(&self) -> usize {
        self.m
    }

    /// `sum_s x_s' R^{-1} x_s` over `s = 1..t`.
    pub fn sum_xx_current(&self) -> f64 {
        self.xx_cc.scalar()
    }

    /// `G_0' R^{-1} x_0`.
    pub fn gx_time0(&self) -> DVector<f64> {
        self.gx0.vector()
    }

    /// `x_0' R^{-1} x_0`.
    pub fn xx_time0(&self) -> f64 {
        self.xx0.scalar()
    }

    /// `G_0' R^{-1} G_0`.
    pub fn gg_time0(&self) -> DMatrix<f64> {
        self.gg0.matrix()
    }

    /// Every accumulated quantity in a fixed order (for exact comparisons).
    pub fn raw_values(&self) -> Vec<f64> {
        [
            &self.gg0, &self.gx0, &self.xx0, &self.gg_cc, &self.gg_cp, &self.gg_pp, &self.gx_cc, &self.gx_cp,
            &self.gx_pc, &self.gx_pp, &self.xx_cc, &self.xx_cp, &self.xx_pp,
        ]
        .iter()
        .flat_map(|b| b.cells.iter().map(Compensated::value))
        .collect()
    }

    /// `Q0 + G_0'R^{-1}G_0 + sum (G_s - a G_{s-1})' R^{-1} (G_s - a G_{s-1})`.
    fn state_gg(&self, alpha: f64) -> DMatrix<f64> {
        let cp = self.gg_cp.matrix();
        self.gg0.matrix() + self.gg_cc.matrix() - (&cp + cp.transpose()) * alpha + self.gg_pp.matrix() * (alpha * alpha)
    }

    /// `G_0'R^{-1}x_0 + sum (G_s - a G_{s-1})' R^{-1} (x_s - a x_{s-1})`.
    fn state_gx(&self, alpha: f64) -> DVector<f64> {
        self.gx0.vector() + self.gx_cc.vector() - (self.gx_cp.vector() + self.gx_pc.vector()) * alpha
            + self.gx_pp.vector() * (alpha * alpha)
    }

    /// `x_0'R^{-1}x_0 + sum (x_s - a x_{s-1})' R^{-1} (x_s - a x_{s-1})`.
    fn state_xx(&self, alpha: f64) -> f64 {
        self.xx0.scalar() + self.xx_cc.scalar() - 2.0 * alpha * self.xx_cp.scalar()
            + alpha * alpha * self.xx_pp.scalar()
    }

    /// Residual quadratic form `sum_{s=0..t} eta_s' R^{-1} eta_s` of the state
    /// equation, where `eta_0 = x_0 - G_0 beta` and
    /// `eta_s = e_s - alpha e_{s-1}` with `e_s = x_s - G_s beta`.
    pub fn state_ssr(&self, alpha: f64, beta: &DVector<f64>) -> f64 {
        let gg = self.state_gg(alpha);
        let gx = self.state_gx(alpha);
        self.state_xx(alpha) - 2.0 * beta.dot(&gx) + (beta.transpose() * gg * beta)[(0, 0)]
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.m {
            return Err(Error::Dimension(format!("beta has {} entries, expected {}", beta.len(), self.m)));
        }
        Ok(())
    }

    fn check_prior(&self, prior: &PriorHyper) -> Result<()> {
        if prior.dim() != self.m {
            return Err(Error::Dimension(format!("prior has {} covariates, expected {}", prior.dim(), self.m)));
        }
        Ok(())
    }

    pub fn beta_full_conditional(&self, alpha: f64, sigma2: f64, prior: &PriorHyper) -> Result<BetaConditional> {
        self.check_prior(prior)?;
        let mut q = self.state_gg(alpha);
        for i in 0..self.m {
            q[(i, i)] += prior.q0;
        }
        let b = self.state_gx(alpha) + DVector::from_column_slice(&prior.b0);
        let q = (&q + q.transpose()) * 0.5;
        let chol = crate::spatial::cholesky_lower(&q)?;
        let mut mean = b.clone();
        crate::spatial::forward_in_place(&chol, mean.as_mut_slice());
        crate::spatial::backward_in_place(&chol, mean.as_mut_slice());
        Ok(BetaConditional {
            precision: q,
            linear: b,
            mean,
            sigma2,
            chol,
        })
    }

    pub fn alpha_full_conditional(&self, beta: &DVector<f64>, sigma2: f64, prior: &PriorHyper) -> Result<Normal1> {
        self.check_beta(beta)?;
        let gg_pp = self.gg_pp.matrix();
        let gg_cp = self.gg_cp.matrix();
        // sum e_{s-1}' R^{-1} e_{s-1}
        let pp = self.xx_pp.scalar() - 2.0 * beta.dot(&self.gx_pp.vector()) + (beta.transpose() * &gg_pp * beta)[(0, 0)];
        // sum e_{s-1}' R^{-1} e_s
        let pc = self.xx_cp.scalar() - beta.dot(&self.gx_pc.vector()) - beta.dot(&self.gx_cp.vector())
            + (beta.transpose() * gg_cp.transpose() * beta)[(0, 0)];
        let prec = prior.s0 + pp.max(0.0);
        if !(prec > 0.0) {
            return Err(Error::Numerical("alpha full conditional has zero precision".into()));
        }
        Ok(Normal1 {
            mean: (prior.a0 + pc) / prec,
            var: sigma2 / prec,
        })
    }

    pub fn sigma2_full_conditional(&self, alpha: f64, beta: &DVector<f64>, prior: &PriorHyper) -> Result<InverseGamma> {
        self.check_beta(beta)?;
        self.check_prior(prior)?;
        let ssr = self.state_ssr(alpha, beta);
        let tol = 1e-9 * (1.0 + self.state_xx(alpha).abs());
        if ssr < -tol {
            return Err(Error::Numerical(format!("negative residual sum of squares {ssr}")));
        }
        let ssr = ssr.max(0.0);
        let shape = 0.5 * (prior.c0 + ((self.t + 1) * self.n + prior.scaled_prior_dims()) as f64);
        let rate = 0.5 * (prior.r0 + ssr + prior.beta_prior_quad(beta) + prior.alpha_prior_quad(alpha));
        InverseGamma::new(shape, rate)
    }

    /// `n_iter` systematic-scan sweeps `beta -> alpha -> sigma2`.
    pub fn gibbs_sweep<R: Rng + ?Sized>(
        &self,
        init: &Theta,
        prior: &PriorHyper,
        n_iter: usize,
        rng: &mut R,
    ) -> Result<Theta> {
        if n_iter == 0 {
            return Err(Error::Config("gibbs sweeps must be at least 1".into()));
        }
        let mut th = init.clone();
        for _ in 0..n_iter {
            th.beta = self.beta_full_conditional(th.alpha, th.sigma2, prior)?.sample(rng);
            th.alpha = self.alpha_full_conditional(&th.beta, th.sigma2, prior)?.sample(rng);
            th.sigma2 = self.sigma2_full_conditional(th.alpha, &th.beta, prior)?.sample(rng);
        }
        Ok(th)
    }

    /// `log p(x_{0:t} | theta, phi)`.
    pub fn joint_state_loglik(&self, theta: &Theta) -> Result<f64> {
        if !(theta.sigma2 > 0.0) {
            return Err(Error::Domain(format!("sigma2 must be positive, got {}", theta.sigma2)));
        }
        self.check_beta(&theta.beta)?;
        let steps = (self.t + 1) as f64;
        let ssr = self.state_ssr(theta.alpha, &theta.beta);
        Ok(-0.5 * steps * self.n as f64 * (LN_2PI + theta.sigma2.ln()) - 0.5 * steps * self.log_det
            - 0.5 * ssr / theta.sigma2)
    }

    pub fn heap_bytes(&self) -> usize {
        [
            &self.gg0, &self.gx0, &self.xx0, &self.gg_cc, &self.gg_cp, &self.gg_pp, &self.gx_cc, &self.gx_cp,
            &self.gx_pc, &self.gx_pp, &self.xx_cc, &self.xx_cp, &self.xx_pp,
        ]
        .iter()
        .map(|b| b.heap_bytes())
        .sum()
    }
}

fn check_shapes(x: &DVector<f64>, g: &DMatrix<f64>, rf: &RangeFactor) -> Result<()> {
    if x.len() != rf.fac.dim() || g.nrows() != rf.fac.dim() {
        return Err(Error::Dimension(format!(
            "state has {} sites, covariates {} rows, factor {}",
            x.len(),
            g.nrows(),
            rf.fac.dim()
        )));
    }
    Ok(())
}

/// Whitened covariates `L(phi)^{-1} G` for every range of a grid at one
/// time step, shared by all chains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhitenedCovariates {
    per_phi: Vec<DMatrix<f64>>,
}

impl WhitenedCovariates {
    pub fn new(g: &DMatrix<f64>, factors: &[RangeFactor]) -> Self {
        Self {
            per_phi: factors.iter().map(|rf| rf.fac.whiten_matrix(g)).collect(),
        }
    }

    pub fn get(&self, j: usize) -> &DMatrix<f64> {
        &self.per_phi[j]
    }

    pub fn len(&self) -> usize {
        self.per_phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_phi.is_empty()
    }
}

/// One [`TemporalSuffStats`] per range in the fine grid. The entry at
/// `own` is the chain's sampling range and doubles as its temporal
/// statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiLikStats {
    own: usize,
    stats: Vec<TemporalSuffStats>,
}

impl PhiLikStats {
    pub fn init(x0: &DVector<f64>, g0: &WhitenedCovariates, factors: &[RangeFactor], own: usize) -> Result<Self> {
        if own >= factors.len() || g0.len() != factors.len() {
            return Err(Error::Dimension("grid and covariate caches disagree".into()));
        }
        let stats = factors
            .iter()
            .enumerate()
            .map(|(j, rf)| {
                let gw = g0.get(j);
                let xw = rf.fac.whiten(x0);
                TemporalSuffStats::init_whitened(rf.phi, rf.fac.log_det(), xw.as_slice(), gw.as_slice(), gw.ncols())
            })
            .collect();
        Ok(Self { own, stats })
    }

    pub fn update(
        &mut self,
        x_t: &DVector<f64>,
        x_prev: &DVector<f64>,
        g_t: &WhitenedCovariates,
        g_prev: &WhitenedCovariates,
        factors: &[RangeFactor],
    ) -> Result<()> {
        if factors.len() != self.stats.len() {
            return Err(Error::Dimension("factor grid does not match statistics".into()));
        }
        for (j, (st, rf)) in self.stats.iter_mut().zip(factors).enumerate() {
            if rf.phi != st.phi {
                return Err(Error::Contract(format!("grid entry {j}: phi {} vs {}", st.phi, rf.phi)));
            }
            let xw = rf.fac.whiten(x_t);
            let xw_prev = rf.fac.whiten(x_prev);
            st.update_whitened(xw.as_slice(), xw_prev.as_slice(), g_t.get(j).as_slice(), g_prev.get(j).as_slice());
        }
        Ok(())
    }

    pub fn own_index(&self) -> usize {
        self.own
    }

    pub fn own(&self) -> &TemporalSuffStats {
        &self.stats[self.own]
    }

    pub fn get(&self, j: usize) -> &TemporalSuffStats {
        &self.stats[j]
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn t(&self) -> usize {
        self.own().t()
    }

    /// `log p(x_{0:t} | theta, phi_j)` for every grid entry.
    pub fn loglik_all(&self, theta: &Theta) -> Result<Vec<f64>> {
        self.stats.iter().map(|s| s.joint_state_loglik(theta)).collect()
    }

    pub fn heap_bytes(&self) -> usize {
        self.stats.iter().map(|s| s.heap_bytes() + std::mem::size_of::<TemporalSuffStats>()).sum()
    }
}
