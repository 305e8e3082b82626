//! Empirical Bayes estimation of the range `phi` from a population of
//! chains run at the coarse grid points.
//!
//! Chains are stored row-wise in `(k, l)` order: all `L_1` chains of the
//! first coarse point, then the `L_2` chains of the second, and so on. A
//! log-likelihood matrix has one row per chain and one column per grid
//! point, holding `log p(x_{0:t} | theta, phi)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::spatial::cholesky_lower;
use crate::suffstats::Theta;
use crate::{Error, Result};

const GRID_MATCH_TOL: f64 = 1e-9;

/// Fine grid, coarse sub-grid, reference point and chain counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub fine: Vec<f64>,
    /// Index into `fine` of each coarse point.
    pub coarse_idx: Vec<usize>,
    /// Index into the coarse grid of the reference point.
    pub reference: usize,
    /// `L_k` per coarse point.
    pub chains: Vec<usize>,
}

impl GridSpec {
    /// Locates `coarse` and `reference` on `fine` (matched to 1e-9).
    pub fn new(fine: Vec<f64>, coarse: &[f64], reference: f64, chains: Vec<usize>) -> Result<Self> {
        if fine.is_empty() {
            return Err(Error::Config("fine grid is empty".into()));
        }
        if let Some(bad) = fine.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("grid points must be positive and finite, got {bad}")));
        }
        if fine.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("fine grid must be strictly ascending".into()));
        }
        let locate = |v: f64| {
            fine.iter()
                .position(|f| (f - v).abs() <= GRID_MATCH_TOL * v.abs().max(1.0))
                .ok_or_else(|| Error::Config(format!("coarse point {v} is not on the fine grid")))
        };
        let coarse_idx = coarse.iter().map(|&c| locate(c)).collect::<Result<Vec<_>>>()?;
        if coarse_idx.is_empty() {
            return Err(Error::Config("coarse grid is empty".into()));
        }
        if coarse_idx.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("coarse grid must be strictly ascending".into()));
        }
        let ref_fine = locate(reference)?;
        let reference = coarse_idx
            .iter()
            .position(|&i| i == ref_fine)
            .ok_or_else(|| Error::Config(format!("reference {reference} is not a coarse grid point")))?;
        if chains.len() != coarse_idx.len() {
            return Err(Error::Config(format!(
                "{} chain counts for {} coarse points",
                chains.len(),
                coarse_idx.len()
            )));
        }
        if chains.contains(&0) {
            return Err(Error::Config("every coarse point needs at least one chain".into()));
        }
        Ok(Self {
            fine,
            coarse_idx,
            reference,
            chains,
        })
    }

    /// `count` equispaced points on `[min, max]`.
    pub fn linspace(min: f64, max: f64, count: usize) -> Vec<f64> {
        match count {
            0 => Vec::new(),
            1 => vec![min],
            _ => (0..count)
                .map(|i| min + (max - min) * i as f64 / (count - 1) as f64)
                .collect(),
        }
    }

    pub fn n_fine(&self) -> usize {
        self.fine.len()
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse_idx.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.iter().sum()
    }

    pub fn coarse(&self) -> Vec<f64> {
        self.coarse_idx.iter().map(|&i| self.fine[i]).collect()
    }

    pub fn reference_phi(&self) -> f64 {
        self.fine[self.coarse_idx[self.reference]]
    }

    pub fn reference_fine_index(&self) -> usize {
        self.coarse_idx[self.reference]
    }

    /// `lambda_k = L_k / sum L`.
    pub fn lambda(&self) -> Vec<f64> {
        let total = self.n_chains() as f64;
        self.chains.iter().map(|&l| l as f64 / total).collect()
    }

    /// Coarse component of each chain row.
    pub fn component_of_rows(&self) -> Vec<usize> {
        self.chains
            .iter()
            .enumerate()
            .flat_map(|(k, &l)| std::iter::repeat_n(k, l))
            .collect()
    }

    /// `(k, l)` of a chain row.
    pub fn chain_id(&self, row: usize) -> (usize, usize) {
        let mut r = row;
        for (k, &l) in self.chains.iter().enumerate() {
            if r < l {
                return (k, r);
            }
            r -= l;
        }
        (self.chains.len(), r)
    }

    /// Columns of `fine_ll` at the coarse points.
    pub fn coarse_columns(&self, fine_ll: &DMatrix<f64>) -> DMatrix<f64> {
        fine_ll.select_columns(&self.coarse_idx)
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_finite(ll: &DMatrix<f64>, grid: &GridSpec) -> Result<()> {
    for i in 0..ll.nrows() {
        if let Some(j) = (0..ll.ncols()).find(|&j| !ll[(i, j)].is_finite()) {
            let (k, l) = grid.chain_id(i);
            return Err(Error::Chain {
                k,
                l,
                source: Box::new(Error::Numerical(format!(
                    "log-likelihood at grid column {j} is {}",
                    ll[(i, j)]
                ))),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseLogisticFit {
    /// `log b_k` over the coarse grid, zero at the reference.
    pub log_b: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Class probabilities `p_ik` and the objective for offsets `eta = log b`.
fn rl_probs(coarse_ll: &DMatrix<f64>, log_lambda: &[f64], eta: &[f64], comp: &[usize]) -> (DMatrix<f64>, f64) {
    let (n, k) = coarse_ll.shape();
    let mut p = DMatrix::zeros(n, k);
    let mut obj = 0.0;
    let mut a = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            a[j] = log_lambda[j] + coarse_ll[(i, j)] - eta[j];
        }
        let lse = log_sum_exp(a.iter().copied());
        for j in 0..k {
            p[(i, j)] = (a[j] - lse).exp();
        }
        obj += a[comp[i]] - lse;
    }
    (p, obj)
}

/// Maximizes the reverse logistic log-likelihood over `log b` with the
/// reference pinned at zero (Newton with step halving).
pub fn reverse_logistic_fit(coarse_ll: &DMatrix<f64>, grid: &GridSpec) -> Result<ReverseLogisticFit> {
    const TOL: f64 = 1e-10;
    const MAX_ITER: usize = 500;
    const MAX_STEP: f64 = 10.0;
    let k = grid.n_coarse();
    if coarse_ll.ncols() != k || coarse_ll.nrows() != grid.n_chains() {
        return Err(Error::Dimension(format!(
            "log-likelihood matrix {}x{} for {} chains and {} coarse points",
            coarse_ll.nrows(),
            coarse_ll.ncols(),
            grid.n_chains(),
            k
        )));
    }
    check_finite(coarse_ll, grid)?;
    let mut eta = vec![0.0; k];
    if k == 1 {
        return Ok(ReverseLogisticFit {
            log_b: eta,
            iterations: 0,
            grad_norm: 0.0,
        });
    }
    let comp = grid.component_of_rows();
    let log_lambda: Vec<f64> = grid.lambda().iter().map(|v| v.ln()).collect();
    let free: Vec<usize> = (0..k).filter(|&j| j != grid.reference).collect();
    let counts: Vec<f64> = grid.chains.iter().map(|&l| l as f64).collect();

    let (mut p, mut obj) = rl_probs(coarse_ll, &log_lambda, &eta, &comp);
    let mut iterations = 0;
    loop {
        let g = DVector::from_iterator(free.len(), free.iter().map(|&j| p.column(j).sum() - counts[j]));
        let gnorm = g.amax();
        if gnorm < TOL {
            return Ok(ReverseLogisticFit {
                log_b: eta,
                iterations,
                grad_norm: gnorm,
            });
        }
        if iterations >= MAX_ITER {
            return Err(Error::NonConvergence {
                iterations,
                grad_norm: gnorm,
                last_iterate: eta,
            });
        }
        // negative Hessian: sum_i diag(p_i) - p_i p_i'
        let f = free.len();
        let mut neg_h = DMatrix::<f64>::zeros(f, f);
        for i in 0..p.nrows() {
            for (a, &ja) in free.iter().enumerate() {
                let pa = p[(i, ja)];
                neg_h[(a, a)] += pa;
                for (b, &jb) in free.iter().enumerate().take(a + 1) {
                    neg_h[(a, b)] -= pa * p[(i, jb)];
                }
            }
        }
        for a in 0..f {
            for b in 0..a {
                neg_h[(b, a)] = neg_h[(a, b)];
            }
        }
        let scale = neg_h.diagonal().amax().max(1e-300);
        let mut ridge = 0.0;
        let c = loop {
            let mut m = neg_h.clone();
            for a in 0..f {
                m[(a, a)] += ridge;
            }
            match cholesky_lower(&m) {
                Ok(c) => break c,
                Err(_) if ridge < scale => ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 },
                Err(e) => return Err(e),
            }
        };
        // ascent step solves (-H) d = g
        let mut d = g.clone();
        crate::spatial::forward_in_place(&c, d.as_mut_slice());
        crate::spatial::backward_in_place(&c, d.as_mut_slice());
        // Under separation the maximizer is at infinity; bounded steps let
        // the gradient test end the search once the probabilities saturate.
        let mut step = (MAX_STEP / d.amax()).min(1.0);
        let mut accepted = false;
        for _ in 0..=60 {
            let mut cand = eta.clone();
            for (a, &j) in free.iter().enumerate() {
                cand[j] += step * d[a];
            }
            let (pc, oc) = rl_probs(coarse_ll, &log_lambda, &cand, &comp);
            if oc >= obj - 1e-12 * (1.0 + obj.abs()) {
                eta = cand;
                p = pc;
                obj = oc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            if gnorm < TOL * 1e3 {
                return Ok(ReverseLogisticFit {
                    log_b: eta,
                    iterations,
                    grad_norm: gnorm,
                });
            }
            return Err(Error::NonConvergence {
                iterations,
                grad_norm: gnorm,
                last_iterate: eta,
            });
        }
    }
}

/// `log sum_k' (L_k' / b_k') p(x_i | theta_i, phi_k')` per chain row.
pub fn log_mixture_denominators(coarse_ll: &DMatrix<f64>, grid: &GridSpec, log_b: &[f64]) -> Vec<f64> {
    let offs: Vec<f64> = grid
        .chains
        .iter()
        .zip(log_b)
        .map(|(&l, &lb)| (l as f64).ln() - lb)
        .collect();
    coarse_ll
        .row_iter()
        .map(|row| log_sum_exp(row.iter().zip(&offs).map(|(v, o)| v + o)))
        .collect()
}

/// Mixture estimator of `log B(phi; phi_ref)` at every fine grid column.
/// The reference column is shifted to exactly zero.
pub fn mixture_bayes_factor(fine_ll: &DMatrix<f64>, grid: &GridSpec, log_den: &[f64]) -> Result<Vec<f64>> {
    if log_den.len() != fine_ll.nrows() {
        return Err(Error::Dimension("denominator count differs from chain count".into()));
    }
    if log_den.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    let mut out: Vec<f64> = (0..fine_ll.ncols())
        .map(|j| log_sum_exp((0..fine_ll.nrows()).map(|i| fine_ll[(i, j)] - log_den[i])))
        .collect();
    let r = out[grid.reference_fine_index()];
    if !r.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    for v in &mut out {
        *v -= r;
    }
    Ok(out)
}

/// Single-reference estimator: `log mean_l exp(ll(phi) - ll(phi_ref))`
/// over chains run at the reference point.
pub fn simplified_bayes_factor(fine_ll: &DMatrix<f64>, ref_fine: usize) -> Vec<f64> {
    let n = fine_ll.nrows() as f64;
    (0..fine_ll.ncols())
        .map(|j| {
            if j == ref_fine {
                0.0
            } else {
                log_sum_exp((0..fine_ll.nrows()).map(|i| fine_ll[(i, j)] - fine_ll[(i, ref_fine)])) - n.ln()
            }
        })
        .collect()
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch-Carlson slopes).
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::Dimension("interpolation needs at least two matching nodes".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("interpolation nodes must be strictly ascending".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let del: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = del[0];
            d[1] = del[0];
        } else {
            for i in 1..n - 1 {
                if del[i - 1] * del[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    d[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
                }
            }
            d[0] = Self::end_slope(h[0], h[1], del[0], del[1]);
            d[n - 1] = Self::end_slope(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
        }
        Ok(Self { x, y, d })
    }

    fn end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
        let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
        if d.signum() != m0.signum() {
            0.0
        } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
            3.0 * m0
        } else {
            d
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let s = (t - self.x[i]) / h;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiEstimate {
    pub phi_hat: f64,
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    /// Set when the table carries no information about `phi`.
    pub flat: bool,
}

/// Normalized trapezoidal cdf of `exp(log_bf)` over the grid.
pub fn grid_cdf(grid: &[f64], log_bf: &[f64]) -> Vec<f64> {
    let m = log_bf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_bf.iter().map(|v| (v - m).exp()).collect();
    let mut cdf = vec![0.0; grid.len()];
    for i in 1..grid.len() {
        cdf[i] = cdf[i - 1] + 0.5 * (w[i - 1] + w[i]) * (grid[i] - grid[i - 1]);
    }
    let total = cdf[grid.len() - 1];
    if total > 0.0 {
        for v in &mut cdf {
            *v /= total;
        }
    }
    cdf
}

/// Smallest `phi` whose interpolated cdf reaches `q`.
fn cdf_quantile(interp: &Pchip, lo: f64, hi: f64, q: f64) -> f64 {
    if interp.eval(lo) >= q {
        return lo;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if interp.eval(m) >= q {
            b = m;
        } else {
            a = m;
        }
        if b - a <= 1e-12 * (1.0 + b.abs()) {
            break;
        }
    }
    b
}

/// Argmax over the grid (ties to the smaller `phi`) and an equal-tailed
/// interval at `level` from the monotone-interpolated cdf.
pub fn estimate_phi(grid: &[f64], log_bf: &[f64], level: f64) -> Result<PhiEstimate> {
    if grid.len() != log_bf.len() || grid.is_empty() {
        return Err(Error::Dimension("Bayes factor table does not match the grid".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("credible level must be in (0, 1), got {level}")));
    }
    if log_bf.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Bayes factor in table".into()));
    }
    let mut index = 0;
    for (i, v) in log_bf.iter().enumerate() {
        if *v > log_bf[index] {
            index = i;
        }
    }
    let spread = log_bf.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - log_bf.iter().cloned().fold(f64::INFINITY, f64::min);
    let flat = spread < 1e-12;
    if flat {
        log::warn!("flat Bayes factor table: interval spans the whole grid");
    }
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    let (lower, upper) = if grid.len() == 1 {
        (lo, hi)
    } else {
        let cdf = grid_cdf(grid, log_bf);
        let interp = Pchip::new(grid.to_vec(), cdf)?;
        let tail = 0.5 * (1.0 - level);
        (cdf_quantile(&interp, lo, hi, tail), cdf_quantile(&interp, lo, hi, 1.0 - tail))
    };
    Ok(PhiEstimate {
        phi_hat: grid[index],
        index,
        lower,
        upper,
        flat,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reweighted {
    pub weights: Vec<f64>,
    pub ess: f64,
    pub x_hat: DVector<f64>,
    pub theta_hat: Theta,
}

/// Normalized importance weights mapping the chain mixture onto the
/// posterior at fine column `phi_idx`.
pub fn reweight(fine_ll: &DMatrix<f64>, grid: &GridSpec, log_bf: &[f64], phi_idx: usize) -> Result<Vec<f64>> {
    let log_lambda: Vec<f64> = grid.lambda().iter().map(|v| v.ln()).collect();
    let lv: Vec<f64> = (0..fine_ll.nrows())
        .map(|i| {
            let den = log_sum_exp(
                grid.coarse_idx
                    .iter()
                    .zip(&log_lambda)
                    .map(|(&j, ll)| ll + fine_ll[(i, j)] - log_bf[j]),
            );
            fine_ll[(i, phi_idx)] - log_bf[phi_idx] - den
        })
        .collect();
    let m = lv.iter().cloned().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let w: Vec<f64> = lv.iter().map(|v| if v.is_nan() { 0.0 } else { (v - m).exp() }).collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / s).collect())
}

/// Reweighted estimates of `x_t` and `theta`. Warns when the weights'
/// effective sample size falls below `ess_floor`.
pub fn reweight_and_estimate(
    fine_ll: &DMatrix<f64>,
    grid: &GridSpec,
    log_bf: &[f64],
    phi_idx: usize,
    xs: &[&DVector<f64>],
    thetas: &[&Theta],
    ess_floor: f64,
) -> Result<Reweighted> {
    if xs.len() != fine_ll.nrows() || thetas.len() != fine_ll.nrows() || xs.is_empty() {
        return Err(Error::Dimension("chain count mismatch in reweighting".into()));
    }
    let weights = reweight(fine_ll, grid, log_bf, phi_idx)?;
    let ess = crate::proposal::effective_sample_size(&weights);
    if ess < ess_floor {
        log::warn!("reweighting effective sample size {ess:.1} is below the floor {ess_floor}");
    }
    let n = xs[0].len();
    let m = thetas[0].beta.len();
    let mut x_hat = DVector::zeros(n);
    let mut beta = DVector::zeros(m);
    let (mut alpha, mut sigma2) = (0.0, 0.0);
    for ((w, x), th) in weights.iter().zip(xs).zip(thetas) {
        x_hat.axpy(*w, x, 1.0);
        beta.axpy(*w, &th.beta, 1.0);
        alpha += w * th.alpha;
        sigma2 += w * th.sigma2;
    }
    Ok(Reweighted {
        weights,
        ess,
        x_hat,
        theta_hat: Theta { alpha, beta, sigma2 },
    })
}

/// How Bayes factors over the fine grid are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    Mixture,
    /// Single-reference ratio estimator; uses only the reference chains.
    Simplified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesFactorTable {
    pub t: usize,
    pub log_b_coarse: Vec<f64>,
    pub log_bf: Vec<f64>,
    pub estimate: PhiEstimate,
}

/// Reverse logistic fit, mixture estimator and `phi` estimate for one step.
pub fn bayes_factor_table(
    t: usize,
    fine_ll: &DMatrix<f64>,
    grid: &GridSpec,
    estimator: Estimator,
    level: f64,
) -> Result<BayesFactorTable> {
    if fine_ll.ncols() != grid.n_fine() || fine_ll.nrows() != grid.n_chains() {
        return Err(Error::Dimension(format!(
            "log-likelihood matrix {}x{} for {} chains and {} grid points",
            fine_ll.nrows(),
            fine_ll.ncols(),
            grid.n_chains(),
            grid.n_fine()
        )));
    }
    check_finite(fine_ll, grid)?;
    let (log_b_coarse, log_bf) = match estimator {
        Estimator::Mixture => {
            let coarse = grid.coarse_columns(fine_ll);
            let fit = reverse_logistic_fit(&coarse, grid)?;
            let den = log_mixture_denominators(&coarse, grid, &fit.log_b);
            (fit.log_b, mixture_bayes_factor(fine_ll, grid, &den)?)
        }
        Estimator::Simplified => {
            let start: usize = grid.chains[..grid.reference].iter().sum();
            let rows: Vec<usize> = (start..start + grid.chains[grid.reference]).collect();
            let sub = fine_ll.select_rows(&rows);
            let bf = simplified_bayes_factor(&sub, grid.reference_fine_index());
            (grid.coarse_idx.iter().map(|&j| bf[j]).collect(), bf)
        }
    };
    let estimate = estimate_phi(&grid.fine, &log_bf, level)?;
    Ok(BayesFactorTable {
        t,
        log_b_coarse,
        log_bf,
        estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn grid2(l: usize) -> GridSpec {
        GridSpec::new(vec![0.2, 0.4], &[0.2, 0.4], 0.2, vec![l, l]).unwrap()
    }

    #[test]
    fn grid_validation() {
        let g = GridSpec::new(GridSpec::linspace(0.2, 0.8, 41), &[0.23, 0.335, 0.44], 0.23, vec![3, 3, 3]).unwrap();
        assert_eq!(g.coarse_idx, vec![2, 9, 16]);
        assert_eq!(g.reference, 0);
        assert_eq!(g.chain_id(4), (1, 1));
        assert!(matches!(GridSpec::new(vec![0.0, 0.1], &[0.1], 0.1, vec![1]), Err(Error::Config(_))));
        assert!(matches!(GridSpec::new(vec![0.1, 0.2], &[0.15], 0.15, vec![1]), Err(Error::Config(_))));
        assert!(matches!(GridSpec::new(vec![0.1, 0.2], &[0.1], 0.2, vec![1]), Err(Error::Config(_))));
        let s: f64 = g.lambda().iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_columns_give_zero() {
        let g = grid2(5);
        let ll = DMatrix::from_fn(10, 2, |i, _| -(i as f64));
        let fit = reverse_logistic_fit(&ll, &g).unwrap();
        assert!(fit.log_b.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn constant_column_shift_recovered() {
        let g = grid2(1);
        let c = 3.7;
        let ll = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0 + c, -4.0, -4.0 + c]);
        let fit = reverse_logistic_fit(&ll, &g).unwrap();
        assert_eq!(fit.log_b[0], 0.0);
        assert!((fit.log_b[1] - c).abs() < 1e-9);
    }

    #[test]
    fn non_finite_row_identifies_chain() {
        let g = grid2(2);
        let mut ll = DMatrix::zeros(4, 2);
        ll[(3, 1)] = f64::NAN;
        match reverse_logistic_fit(&ll, &g) {
            Err(Error::Chain { k, l, .. }) => assert_eq!((k, l), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Unnormalized densities `h_k(x) = exp(-(x - m_k)^2 / (2 s_k^2))` on
    /// the real line; `b_k` is the ratio of their integrals to the first.
    struct Mixture {
        m: Vec<f64>,
        s: Vec<f64>,
    }

    impl Mixture {
        fn log_h(&self, k: usize, x: f64) -> f64 {
            -0.5 * ((x - self.m[k]) / self.s[k]).powi(2) + 0.3 * (x * 1.7).sin()
        }

        fn log_norm(&self, k: usize) -> f64 {
            integrate(|x| self.log_h(k, x).exp(), self.m[k] - 12.0 * self.s[k], self.m[k] + 12.0 * self.s[k], 1e-13)
                .ln()
        }

        /// Exact draws by rejection from the Gaussian envelope.
        fn draw<R: Rng>(&self, k: usize, rng: &mut R) -> f64 {
            loop {
                let x = self.m[k] + self.s[k] * rng.sample::<f64, _>(StandardNormal);
                let acc = (0.3 * (x * 1.7).sin() - 0.3).exp();
                if rng.random::<f64>() < acc {
                    return x;
                }
            }
        }

        fn table<R: Rng>(&self, l: usize, rng: &mut R) -> DMatrix<f64> {
            let k = self.m.len();
            let mut ll = DMatrix::zeros(k * l, k);
            for c in 0..k {
                for r in 0..l {
                    let x = self.draw(c, rng);
                    for j in 0..k {
                        ll[(c * l + r, j)] = self.log_h(j, x);
                    }
                }
            }
            ll
        }
    }

    #[test]
    fn reverse_logistic_matches_quadrature_oracle() {
        let mix = Mixture {
            m: vec![0.0, 0.8, 1.5],
            s: vec![1.0, 0.7, 1.4],
        };
        let exact: Vec<f64> = (0..3).map(|k| mix.log_norm(k) - mix.log_norm(0)).collect();
        let g = GridSpec::new(vec![0.1, 0.2, 0.3], &[0.1, 0.2, 0.3], 0.1, vec![200; 3]).unwrap();
        let mut rng = stream(21, &[]);
        let reps: Vec<Vec<f64>> = (0..40).map(|_| reverse_logistic_fit(&mix.table(200, &mut rng), &g).unwrap().log_b).collect();
        for j in 1..3 {
            let v: Vec<f64> = reps.iter().map(|r| r[j]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            assert!((reps[0][j] - exact[j]).abs() < 3.0 * sd, "{} vs {} (sd {sd})", reps[0][j], exact[j]);
            assert!((mean - exact[j]).abs() < 3.0 * sd / (v.len() as f64).sqrt() + 1e-3);
        }
    }

    #[test]
    fn mixture_estimator_consistent_with_reverse_logistic() {
        let mix = Mixture {
            m: vec![0.0, 0.8, 1.5],
            s: vec![1.0, 0.7, 1.4],
        };
        let g = GridSpec::new(vec![0.1, 0.2, 0.3], &[0.1, 0.2, 0.3], 0.1, vec![300; 3]).unwrap();
        let ll = mix.table(300, &mut stream(22, &[]));
        let fit = reverse_logistic_fit(&ll, &g).unwrap();
        let den = log_mixture_denominators(&ll, &g, &fit.log_b);
        let bf = mixture_bayes_factor(&ll, &g, &den).unwrap();
        assert_eq!(bf[0], 0.0);
        for j in 0..3 {
            assert!((bf[j] - fit.log_b[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn self_normalization_with_exact_factors() {
        let mix = Mixture {
            m: vec![0.0, 0.8, 1.5],
            s: vec![1.0, 0.7, 1.4],
        };
        let exact: Vec<f64> = (0..3).map(|k| mix.log_norm(k) - mix.log_norm(0)).collect();
        let g = GridSpec::new(vec![0.1, 0.2, 0.3], &[0.1, 0.2, 0.3], 0.1, vec![4000; 3]).unwrap();
        let ll = mix.table(4000, &mut stream(23, &[]));
        let den = log_mixture_denominators(&ll, &g, &exact);
        let raw = log_sum_exp((0..ll.nrows()).map(|i| ll[(i, 0)] - den[i]));
        assert!(raw.abs() < 0.03, "{raw}");
    }

    #[test]
    fn single_component_is_self_ratio() {
        let g = GridSpec::new(vec![0.1, 0.2, 0.3], &[0.2], 0.2, vec![4]).unwrap();
        let ll = DMatrix::from_fn(4, 3, |i, j| -((i + 1) as f64) * (j as f64 + 0.5));
        let t = bayes_factor_table(1, &ll, &g, Estimator::Mixture, 0.99).unwrap();
        assert_eq!(t.log_bf[1], 0.0);
        let simp = bayes_factor_table(1, &ll, &g, Estimator::Simplified, 0.99).unwrap();
        for (a, b) in t.log_bf.iter().zip(&simp.log_bf) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = reweight(&ll, &g, &t.log_bf, 1).unwrap();
        assert!(w.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn flat_table_interval_is_linear_in_mass() {
        let grid = GridSpec::linspace(0.2, 0.8, 41);
        let e = estimate_phi(&grid, &vec![0.0; 41], 0.99).unwrap();
        assert!(e.flat);
        assert_eq!(e.phi_hat, 0.2);
        assert!((e.lower - (0.2 + 0.005 * 0.6)).abs() < 1e-9);
        assert!((e.upper - (0.2 + 0.995 * 0.6)).abs() < 1e-9);
    }

    #[test]
    fn symmetric_bump_interval() {
        let grid = GridSpec::linspace(0.2, 0.8, 41);
        let lb: Vec<f64> = grid.iter().map(|p| -0.5 * ((p - 0.5) / 0.06).powi(2)).collect();
        let e = estimate_phi(&grid, &lb, 0.9).unwrap();
        assert!((e.phi_hat - 0.5).abs() < 1e-12);
        assert!(((e.upper - 0.5) - (0.5 - e.lower)).abs() < 0.015);
        assert!((e.upper - 0.5 - 1.645 * 0.06).abs() < 0.01);
    }

    #[test]
    fn ties_go_to_smaller_phi() {
        let e = estimate_phi(&[0.1, 0.2, 0.3], &[0.0, 1.0, 1.0], 0.9).unwrap();
        assert_eq!(e.index, 1);
    }

    #[test]
    fn pchip_reproduces_linear_and_stays_monotone() {
        let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]).unwrap();
        for t in [0.0, 0.5, 2.2, 4.0] {
            assert!((p.eval(t) - (1.0 + 2.0 * t)).abs() < 1e-12);
        }
        let p = Pchip::new(vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0, 0.01, 0.99, 1.0]).unwrap();
        let mut prev = -1.0;
        for i in 0..=400 {
            let v = p.eval(i as f64 / 100.0);
            assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn reweighted_means() {
        let g = GridSpec::new(vec![0.1, 0.2], &[0.1, 0.2], 0.1, vec![1, 1]).unwrap();
        let ll = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        let xs = [DVector::from_element(2, 1.0), DVector::from_element(2, 3.0)];
        let th = [Theta::new(0.2, vec![1.0], 1.0), Theta::new(0.4, vec![3.0], 2.0)];
        let r = reweight_and_estimate(
            &ll,
            &g,
            &[0.0, 0.0],
            1,
            &xs.iter().collect::<Vec<_>>(),
            &th.iter().collect::<Vec<_>>(),
            1.0,
        )
        .unwrap();
        assert!((r.x_hat[0] - 2.0).abs() < 1e-15);
        assert!((r.theta_hat.alpha - 0.3).abs() < 1e-15);
        assert!((r.theta_hat.sigma2 - 1.5).abs() < 1e-15);
        assert!((r.ess - 2.0).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn reference_is_zero_and_weights_normalize(
            base in proptest::collection::vec(-30.0f64..0.0, 20),
            noise in proptest::collection::vec(-1.0f64..1.0, 80),
            j in 0usize..4,
        ) {
            let g = GridSpec::new(vec![0.1, 0.2, 0.3, 0.4], &[0.1, 0.3], 0.3, vec![12, 8]).unwrap();
            let ll = DMatrix::from_fn(20, 4, |i, c| base[i] + noise[4 * i + c]);
            let t = bayes_factor_table(2, &ll, &g, Estimator::Mixture, 0.95).unwrap();
            proptest::prop_assert_eq!(t.log_bf[2], 0.0);
            proptest::prop_assert!(t.estimate.lower <= t.estimate.upper);
            let w = reweight(&ll, &g, &t.log_bf, j).unwrap();
            proptest::prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
