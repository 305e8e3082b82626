//! Skew-normal distribution `SN(xi, omega, a)` with density
//! `2 / omega * phi(w) * Phi(a w)`, `w = (x - xi) / omega`.
//!
//! The CDF uses Owen's T function; tails on the light side are evaluated
//! through the complement of `T` so that quantiles stay accurate far from
//! the centre.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use serde::{Deserialize, Serialize};
use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::quad::integrate;
use crate::{Error, Result};

const INV_2PI: f64 = 1.0 / (2.0 * PI);
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const QUAD_TOL: f64 = 1e-14;

/// Largest attainable skewness magnitude.
pub const MAX_SKEWNESS: f64 = 0.995_271_746_431_156;
/// Skewness values are clamped to this magnitude before fitting.
pub const SKEWNESS_CLAMP: f64 = 0.995;

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

/// `ln Phi(z)`, accurate deep in the lower tail.
pub fn std_normal_ln_cdf(z: f64) -> f64 {
    if z > -30.0 {
        std_normal_cdf(z).ln()
    } else {
        let z2 = z * z;
        -0.5 * z2 - LN_SQRT_2PI - (-z).ln() + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2)).ln()
    }
}

/// `Phi^{-1}(p)`.
pub fn std_normal_quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Owen's T function `T(h, a) = 1/(2 pi) int_0^a exp(-h^2 (1+x^2)/2) / (1+x^2) dx`.
pub fn owens_t(h: f64, a: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    if a < 0.0 {
        return -owens_t(h, -a);
    }
    let h = h.abs();
    if a.is_infinite() {
        return 0.5 * std_normal_cdf(-h);
    }
    if a <= 1.0 {
        return t_direct(h, a);
    }
    // T(h, a) + T(ah, 1/a) = Q(h)/2 + Q(ah)/2 - Q(h) Q(ah), h >= 0, Q = 1 - Phi
    let ah = a * h;
    let (qh, qah) = (std_normal_cdf(-h), std_normal_cdf(-ah));
    0.5 * qh + 0.5 * qah - qh * qah - t_direct(ah, 1.0 / a)
}

fn t_direct(h: f64, a: f64) -> f64 {
    let h2 = h * h;
    INV_2PI * integrate(|x| (-0.5 * h2 * (1.0 + x * x)).exp() / (1.0 + x * x), 0.0, a, QUAD_TOL)
}

/// `T(h, inf) - T(h, a)` for `h >= 0`, `a > 0`, without cancellation.
fn owens_t_complement(h: f64, a: f64) -> f64 {
    let h2 = h * h;
    // Integral over u = 1/x in (0, min(1, 1/a)).
    let upper = (1.0 / a).min(1.0);
    let inner = integrate(
        |u| {
            if u <= 0.0 {
                0.0
            } else {
                (-0.5 * h2 * (1.0 + 1.0 / (u * u))).exp() / (1.0 + u * u)
            }
        },
        0.0,
        upper,
        QUAD_TOL,
    );
    let mut v = INV_2PI * inner;
    if a < 1.0 {
        v += t_direct_between(h, a, 1.0);
    }
    v
}

fn t_direct_between(h: f64, lo: f64, hi: f64) -> f64 {
    let h2 = h * h;
    INV_2PI * integrate(|x| (-0.5 * h2 * (1.0 + x * x)).exp() / (1.0 + x * x), lo, hi, QUAD_TOL)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkewNormal {
    pub xi: f64,
    pub omega: f64,
    pub a: f64,
}

impl SkewNormal {
    pub fn new(xi: f64, omega: f64, a: f64) -> Result<Self> {
        if !(omega > 0.0) || !xi.is_finite() || !a.is_finite() {
            return Err(Error::Domain(format!("invalid skew-normal ({xi}, {omega}, {a})")));
        }
        Ok(Self { xi, omega, a })
    }

    pub fn delta(&self) -> f64 {
        self.a / (1.0 + self.a * self.a).sqrt()
    }

    pub fn delta_sq(&self) -> f64 {
        self.a * self.a / (1.0 + self.a * self.a)
    }

    pub fn mean(&self) -> f64 {
        self.xi + self.omega * self.delta() * (2.0 / PI).sqrt()
    }

    pub fn variance(&self) -> f64 {
        self.omega * self.omega * (1.0 - 2.0 * self.delta_sq() / PI)
    }

    pub fn skewness(&self) -> f64 {
        let mz = self.delta() * (2.0 / PI).sqrt();
        0.5 * (4.0 - PI) * mz.powi(3) / (1.0 - mz * mz).powf(1.5)
    }

    /// Matches mean, standard deviation and skewness (clamped to
    /// [`SKEWNESS_CLAMP`]).
    pub fn from_moments(mean: f64, sd: f64, skewness: f64) -> Result<Self> {
        if !(sd > 0.0) || !mean.is_finite() || !skewness.is_finite() {
            return Err(Error::Domain(format!("invalid moments ({mean}, {sd}, {skewness})")));
        }
        let g = skewness.clamp(-SKEWNESS_CLAMP, SKEWNESS_CLAMP);
        let c = (2.0 * g.abs() / (4.0 - PI)).cbrt();
        let delta = g.signum() * (PI / 2.0).sqrt() * c / (1.0 + c * c).sqrt();
        let delta = if g == 0.0 { 0.0 } else { delta };
        let a = delta / (1.0 - delta * delta).sqrt();
        let omega = sd / (1.0 - 2.0 * delta * delta / PI).sqrt();
        let xi = mean - omega * delta * (2.0 / PI).sqrt();
        Self::new(xi, omega, a)
    }

    fn w(&self, x: f64) -> f64 {
        (x - self.xi) / self.omega
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let w = self.w(x);
        std::f64::consts::LN_2 - self.omega.ln() - 0.5 * w * w - LN_SQRT_2PI + std_normal_ln_cdf(self.a * w)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let w = self.w(x);
        if self.a >= 0.0 && w < 0.0 {
            2.0 * owens_t_complement(-w, self.a)
        } else if self.a < 0.0 && w > 0.0 {
            1.0 - 2.0 * owens_t_complement(w, -self.a)
        } else {
            (std_normal_cdf(w) - 2.0 * owens_t(w, self.a)).clamp(0.0, 1.0)
        }
    }

    /// `1 - F(x)`.
    pub fn sf(&self, x: f64) -> f64 {
        let mirrored = SkewNormal {
            xi: -self.xi,
            omega: self.omega,
            a: -self.a,
        };
        mirrored.cdf(-x)
    }

    /// Quantile at lower-tail probability `p`.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile probability {p} outside (0, 1)")));
        }
        if p <= 0.5 {
            self.solve_tail(p.ln(), false)
        } else {
            self.solve_tail((1.0 - p).ln(), true)
        }
    }

    /// `F^{-1}(Phi(z))`, using the upper tail when `z > 0`.
    pub fn quantile_from_z(&self, z: f64) -> Result<f64> {
        if self.a == 0.0 {
            return Ok(self.xi + self.omega * z);
        }
        if z <= 0.0 {
            self.solve_tail(std_normal_ln_cdf(z), false)
        } else {
            self.solve_tail(std_normal_ln_cdf(-z), true)
        }
    }

    /// `Phi^{-1}(F(x))`, the inverse of [`quantile_from_z`](Self::quantile_from_z).
    pub fn z_from_value(&self, x: f64) -> f64 {
        if self.a == 0.0 {
            return self.w(x);
        }
        let f = self.cdf(x);
        if f <= 0.5 {
            std_normal_quantile(f)
        } else {
            -std_normal_quantile(self.sf(x))
        }
    }

    /// Solve `ln F(x) = target` (or `ln S(x) = target` for the upper tail)
    /// by Newton steps on the log scale, safeguarded by bisection.
    fn solve_tail(&self, target: f64, upper: bool) -> Result<f64> {
        let g = |x: f64| -> (f64, f64) {
            let tail = if upper { self.sf(x) } else { self.cdf(x) };
            let lt = tail.ln();
            let dens = self.ln_pdf(x);
            let slope = (dens - lt).exp();
            if upper {
                (lt - target, -slope)
            } else {
                (lt - target, slope)
            }
        };
        // bracket: g(lo) < 0 < g(hi) for lower tail, reversed for upper
        let sd = self.variance().sqrt();
        let mean = self.mean();
        let guess_z = -(-2.0 * target).sqrt();
        let mut x = if upper { mean - guess_z * sd } else { mean + guess_z * sd };
        let sign = if upper { -1.0 } else { 1.0 };
        let (mut lo, mut hi) = (x - sd, x + sd);
        let mut step = sd;
        loop {
            let v = sign * g(lo).0;
            if v < 0.0 || !v.is_finite() && v < 0.0 {
                break;
            }
            step *= 2.0;
            lo -= step;
            if step > 1e6 * self.omega {
                return Err(Error::Numerical("skew-normal quantile bracket failed".into()));
            }
        }
        step = sd;
        loop {
            let v = sign * g(hi).0;
            if v > 0.0 {
                break;
            }
            step *= 2.0;
            hi += step;
            if step > 1e6 * self.omega {
                return Err(Error::Numerical("skew-normal quantile bracket failed".into()));
            }
        }
        // g(lo) is -inf when the tail underflows; keep the bracket valid anyway
        x = x.clamp(lo, hi);
        for _ in 0..200 {
            let (v, d) = g(x);
            let sv = sign * v;
            if sv.is_finite() {
                if sv < 0.0 {
                    lo = x;
                } else {
                    hi = x;
                }
            } else {
                lo = x;
            }
            let mut next = if v.is_finite() && d.is_finite() && d != 0.0 { x - v / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-12 * self.omega.max(x.abs() * 1e-3) || hi - lo <= 1e-13 * (1.0 + x.abs()) {
                return Ok(next);
            }
            x = next;
        }
        Err(Error::Numerical("skew-normal quantile did not converge".into()))
    }
}

/// Mean, variance and skewness of a one-dimensional density
/// `exp(-f(x))` approximated around its mode `mode`, where `s2` is the
/// Gaussian variance at the mode and `d3, d4, d5` are the third to fifth
/// derivatives of `f` at the mode.
pub fn expansion_moments(mode: f64, s2: f64, d3: f64, d4: f64, d5: f64) -> (f64, f64, f64) {
    let s = s2.sqrt();
    let a3 = -d3 * s * s2;
    let a4 = -d4 * s2 * s2;
    let a5 = -d5 * s2 * s2 * s;
    let mean = mode + s * (0.5 * a3 + 0.625 * a3.powi(3) + 2.0 / 3.0 * a3 * a4 + 0.125 * a5);
    let var = s2 * (1.0 + a3 * a3 + 0.5 * a4);
    let skew = a3 + 2.5 * a3.powi(3) + 2.75 * a3 * a4 + 0.5 * a5;
    (mean, var.max(1e-3 * s2), skew)
}
