//! KL divergences between members of a one-parameter exponential family,
//! identified by their means, and the one-dimensional minimizer
//! `argmin_{lambda in [lo, hi]} weight * d(mu, lambda) + slope * lambda`
//! that every constrained subproblem in [`crate::solvers`] reduces to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLIP: f64 = 1e-6;

const BISECT_TOL: f64 = 1e-10;
const BISECT_MAX_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    GaussianKnownVariance,
    Bernoulli,
}

/// Observation family shared by every cell of an instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FamilyRepr", into = "FamilyRepr")]
pub struct FamilySpec {
    pub kind: FamilyKind,
    /// Standard deviation; meaningful for the Gaussian family only.
    pub sigma: f64,
    /// Bernoulli domain guard; means are clipped to `[clip, 1 - clip]`.
    pub clip: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum FamilyRepr {
    Gaussian {
        sigma: f64,
    },
    Bernoulli {
        #[serde(default = "default_clip")]
        clip: f64,
    },
}

fn default_clip() -> f64 {
    DEFAULT_CLIP
}

impl TryFrom<FamilyRepr> for FamilySpec {
    type Error = Error;

    fn try_from(repr: FamilyRepr) -> Result<Self> {
        match repr {
            FamilyRepr::Gaussian { sigma } => FamilySpec::gaussian(sigma),
            FamilyRepr::Bernoulli { clip } => FamilySpec::bernoulli_with_clip(clip),
        }
    }
}

impl From<FamilySpec> for FamilyRepr {
    fn from(f: FamilySpec) -> Self {
        match f.kind {
            FamilyKind::GaussianKnownVariance => FamilyRepr::Gaussian { sigma: f.sigma },
            FamilyKind::Bernoulli => FamilyRepr::Bernoulli { clip: f.clip },
        }
    }
}

impl FamilySpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!(
                "gaussian sigma must be > 0, got {sigma}"
            )));
        }
        Ok(Self {
            kind: FamilyKind::GaussianKnownVariance,
            sigma,
            clip: DEFAULT_CLIP,
        })
    }

    pub fn bernoulli() -> Self {
        Self {
            kind: FamilyKind::Bernoulli,
            sigma: 0.5,
            clip: DEFAULT_CLIP,
        }
    }

    pub fn bernoulli_with_clip(clip: f64) -> Result<Self> {
        if !(clip > 0.0 && clip < 0.5) {
            return Err(Error::invalid(format!(
                "bernoulli clip must lie in (0, 0.5), got {clip}"
            )));
        }
        Ok(Self {
            clip,
            ..Self::bernoulli()
        })
    }

    pub fn is_bernoulli(&self) -> bool {
        self.kind == FamilyKind::Bernoulli
    }

    /// Clip a mean into the family's domain (identity for Gaussian).
    #[inline]
    pub fn clip_mean(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::GaussianKnownVariance => mu,
            FamilyKind::Bernoulli => mu.clamp(self.clip, 1.0 - self.clip),
        }
    }

    /// Admissible range of alternative means.
    #[inline]
    pub fn domain(&self) -> (f64, f64) {
        match self.kind {
            FamilyKind::GaussianKnownVariance => (f64::NEG_INFINITY, f64::INFINITY),
            FamilyKind::Bernoulli => (self.clip, 1.0 - self.clip),
        }
    }

    /// `d(mu, lambda)` without argument validation.
    #[inline]
    pub fn kl_unchecked(&self, mu: f64, lambda: f64) -> f64 {
        match self.kind {
            FamilyKind::GaussianKnownVariance => {
                let diff = mu - lambda;
                diff * diff / (2.0 * self.sigma * self.sigma)
            }
            FamilyKind::Bernoulli => {
                let m = self.clip_mean(mu);
                let x = self.clip_mean(lambda);
                let v = m * (m / x).ln() + (1.0 - m) * ((1.0 - m) / (1.0 - x)).ln();
                v.max(0.0)
            }
        }
    }

    /// KL divergence `d(mu, lambda)`.
    pub fn kl(&self, mu: f64, lambda: f64) -> Result<f64> {
        if !mu.is_finite() || !lambda.is_finite() {
            return Err(Error::invalid(format!(
                "kl arguments must be finite: ({mu}, {lambda})"
            )));
        }
        Ok(self.kl_unchecked(mu, lambda))
    }

    /// `d/d lambda d(mu, lambda)`.
    #[inline]
    pub fn kl_grad(&self, mu: f64, lambda: f64) -> f64 {
        match self.kind {
            FamilyKind::GaussianKnownVariance => (lambda - mu) / (self.sigma * self.sigma),
            FamilyKind::Bernoulli => {
                let m = self.clip_mean(mu);
                let x = self.clip_mean(lambda);
                (x - m) / (x * (1.0 - x))
            }
        }
    }

    /// `d^2/d lambda^2 d(mu, lambda)`.
    #[inline]
    pub fn kl_hess(&self, mu: f64, lambda: f64) -> f64 {
        match self.kind {
            FamilyKind::GaussianKnownVariance => 1.0 / (self.sigma * self.sigma),
            FamilyKind::Bernoulli => {
                let m = self.clip_mean(mu);
                let x = self.clip_mean(lambda);
                m / (x * x) + (1.0 - m) / ((1.0 - x) * (1.0 - x))
            }
        }
    }

    /// Minimize `weight * d(mu, lambda) + slope * lambda` over
    /// `lambda in [lower, upper]` (intersected with the family domain).
    /// Returns the minimizer and the attained objective.
    pub fn kl_argmin_linear(
        &self,
        mu: f64,
        weight: f64,
        slope: f64,
        lower: f64,
        upper: f64,
    ) -> Result<(f64, f64)> {
        if !mu.is_finite() || !weight.is_finite() || !slope.is_finite() || weight < 0.0 {
            return Err(Error::invalid(format!(
                "kl_argmin_linear: mu={mu}, weight={weight}, slope={slope}"
            )));
        }
        if lower.is_nan() || upper.is_nan() || lower > upper {
            return Err(Error::invalid(format!("empty interval [{lower}, {upper}]")));
        }
        let (dlo, dhi) = self.domain();
        let lo = lower.max(dlo);
        let hi = upper.min(dhi);
        if lo > hi {
            return Err(Error::InfeasibleSubproblem(format!(
                "interval [{lower}, {upper}] misses the family domain"
            )));
        }
        let lambda = self.argmin_in(mu, weight, slope, lo, hi)?;
        Ok((
            lambda,
            weight * self.kl_unchecked(mu, lambda) + slope * lambda,
        ))
    }

    /// Minimizer only; `lo <= hi` already intersected with the domain.
    #[inline]
    pub(crate) fn argmin_in(
        &self,
        mu: f64,
        weight: f64,
        slope: f64,
        lo: f64,
        hi: f64,
    ) -> Result<f64> {
        if weight == 0.0 {
            let x = if slope > 0.0 {
                lo
            } else if slope < 0.0 {
                hi
            } else {
                self.clip_mean(mu).clamp(lo, hi)
            };
            if !x.is_finite() {
                return Err(Error::UnboundedObjective);
            }
            return Ok(x);
        }
        match self.kind {
            FamilyKind::GaussianKnownVariance => {
                Ok((mu - slope * self.sigma * self.sigma / weight).clamp(lo, hi))
            }
            FamilyKind::Bernoulli => {
                let m = self.clip_mean(mu);
                let x = bernoulli_stationary(m, weight, slope).unwrap_or_else(|| {
                    self.bisect_stationary(m, weight, slope, self.clip, 1.0 - self.clip)
                });
                Ok(x.clamp(lo, hi))
            }
        }
    }

    /// Bisection on the increasing derivative `weight * d'(mu, x) + slope`.
    pub fn bisect_stationary(&self, mu: f64, weight: f64, slope: f64, lo: f64, hi: f64) -> f64 {
        let deriv = |x: f64| weight * self.kl_grad(mu, x) + slope;
        if deriv(lo) >= 0.0 {
            return lo;
        }
        if deriv(hi) <= 0.0 {
            return hi;
        }
        let (mut a, mut b) = (lo, hi);
        for _ in 0..BISECT_MAX_ITERS {
            let mid = 0.5 * (a + b);
            if deriv(mid) < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
            if b - a <= BISECT_TOL {
                break;
            }
        }
        0.5 * (a + b)
    }
}

/// Root in (0, 1) of `weight (x - mu) + slope x (1 - x)`, which has the sign
/// of the Bernoulli stationarity condition. Exactly one root lies in (0, 1)
/// for `mu` in (0, 1). Returns `None` when rounding makes the pick ambiguous.
fn bernoulli_stationary(mu: f64, weight: f64, slope: f64) -> Option<f64> {
    let s = slope;
    if s.abs() <= 1e-14 * weight {
        return Some(mu);
    }
    // s x^2 - (w + s) x + w mu = 0
    let b = weight + s;
    let disc = b * b - 4.0 * s * weight * mu;
    if disc < 0.0 {
        return None;
    }
    let qv = 0.5 * (b + b.signum() * disc.sqrt());
    if qv == 0.0 {
        return None;
    }
    let r1 = qv / s;
    let r2 = weight * mu / qv;
    let in1 = (0.0..=1.0).contains(&r1);
    let in2 = (0.0..=1.0).contains(&r2);
    let mut x = match (in1, in2) {
        (true, false) => r1,
        (false, true) => r2,
        _ => return None,
    };
    // one Newton polish on g(x) = w (x - mu) + s x (1 - x)
    let g = weight * (x - mu) + s * x * (1.0 - x);
    let dg = weight + s * (1.0 - 2.0 * x);
    if dg != 0.0 {
        let nx = x - g / dg;
        if (0.0..=1.0).contains(&nx) {
            x = nx;
        }
    }
    Some(x)
}
