//! Problem instances: the means matrix, subpopulation weights, the
//! observation family and the fairness rule.
//!
//! Policies and subpopulations are 0-based internally. A best policy is
//! reported as `Option<usize>`; `None` means no policy satisfies the rule.
//! [`policy_label`] converts to the external `{0} ∪ [K]` convention.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cells::CellMatrix;
use crate::error::{Error, Result};
use crate::expfamily::FamilySpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FairnessSpec {
    /// Feasible iff every subpopulation mean is at least `c_min`.
    HardThreshold { c_min: f64 },
    /// No feasible set; policies are ranked by shortfall-penalized means.
    Penalized { c_min: f64, gamma: Vec<f64> },
    /// Feasible iff `sum_l (mu_kl - mu_bar_k)^2 <= c_var`.
    VarianceBall { c_var: f64 },
}

impl FairnessSpec {
    pub fn name(&self) -> &'static str {
        match self {
            FairnessSpec::HardThreshold { .. } => "hard_threshold",
            FairnessSpec::Penalized { .. } => "penalized",
            FairnessSpec::VarianceBall { .. } => "variance_ball",
        }
    }
}

/// Why an instance falls outside the identifiable class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum NotInClass {
    /// The best feasible policy sits within `margin` of its constraint.
    BoundaryConstraint {
        policy: usize,
        subpop: Option<usize>,
    },
    /// Two feasible policies are within `margin` of each other.
    NonUniqueOptimum { best: usize, rival: usize },
    /// No policy is feasible but some policy is not strictly infeasible.
    NotStrictlyInfeasible { policy: usize },
    /// Penalized means of the leader and a rival are within `margin`.
    PenalizedTie { best: usize, rival: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Membership {
    InS,
    NotInS(NotInClass),
}

impl Membership {
    pub fn is_in(&self) -> bool {
        matches!(self, Membership::InS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "InstanceFile")]
pub struct Instance {
    mu: CellMatrix,
    q: Vec<f64>,
    family: FamilySpec,
    fairness: FairnessSpec,
}

/// On-disk layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceFile {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    /// Row-major `K x L` means.
    pub mu: Vec<f64>,
    pub q: Vec<f64>,
    pub family: FamilySpec,
    pub fairness: FairnessSpec,
}

impl From<Instance> for InstanceFile {
    fn from(inst: Instance) -> Self {
        InstanceFile {
            k: inst.num_policies(),
            l: inst.num_subpops(),
            mu: inst.mu.into_vec(),
            q: inst.q,
            family: inst.family,
            fairness: inst.fairness,
        }
    }
}

impl<'de> Deserialize<'de> for Instance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = InstanceFile::deserialize(d)?;
        Instance::try_from(file).map_err(serde::de::Error::custom)
    }
}

impl TryFrom<InstanceFile> for Instance {
    type Error = Error;

    fn try_from(f: InstanceFile) -> Result<Self> {
        if f.mu.len() != f.k * f.l {
            return Err(Error::Config(format!(
                "mu has {} entries, expected K*L = {}",
                f.mu.len(),
                f.k * f.l
            )));
        }
        Instance::new(
            CellMatrix::from_row_major(f.k, f.l, f.mu),
            f.q,
            f.family,
            f.fairness,
        )
    }
}

/// `0` for no policy, `k + 1` otherwise.
pub fn policy_label(best: Option<usize>) -> usize {
    best.map_or(0, |k| k + 1)
}

impl Instance {
    pub fn new(
        mu: CellMatrix,
        q: Vec<f64>,
        family: FamilySpec,
        fairness: FairnessSpec,
    ) -> Result<Self> {
        let (k, l) = (mu.rows(), mu.cols());
        if k < 2 {
            return Err(Error::invalid(format!("need at least 2 policies, got {k}")));
        }
        if l < 1 {
            return Err(Error::invalid("need at least 1 subpopulation"));
        }
        if q.len() != l {
            return Err(Error::invalid(format!(
                "q has length {}, expected {l}",
                q.len()
            )));
        }
        if q.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::invalid("q entries must be finite and nonnegative"));
        }
        let total: f64 = q.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("q must have positive mass"));
        }
        let q = if (total - 1.0).abs() > 1e-9 {
            log::warn!("subpopulation weights sum to {total}; renormalizing");
            q.iter().map(|x| x / total).collect()
        } else {
            q
        };
        if mu.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("means must be finite"));
        }
        let mu = mu.map(|m| family.clip_mean(m));
        match &fairness {
            FairnessSpec::HardThreshold { c_min } if !c_min.is_finite() => {
                return Err(Error::invalid("c_min must be finite"));
            }
            FairnessSpec::Penalized { c_min, gamma } => {
                if !c_min.is_finite() {
                    return Err(Error::invalid("c_min must be finite"));
                }
                if gamma.len() != l {
                    return Err(Error::invalid(format!(
                        "gamma has length {}, expected {l}",
                        gamma.len()
                    )));
                }
                if gamma.iter().any(|g| !g.is_finite() || *g < 0.0) {
                    return Err(Error::invalid("gamma entries must be finite and >= 0"));
                }
            }
            FairnessSpec::VarianceBall { c_var } if !(c_var.is_finite() && *c_var > 0.0) => {
                return Err(Error::invalid("c_var must be > 0"));
            }
            _ => {}
        }
        Ok(Self {
            mu,
            q,
            family,
            fairness,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    /// Same structure (q, family, fairness) with different means.
    pub fn with_means(&self, mu: CellMatrix) -> Result<Self> {
        Self::new(mu, self.q.clone(), self.family, self.fairness.clone())
    }

    pub fn with_fairness(&self, fairness: FairnessSpec) -> Result<Self> {
        Self::new(self.mu.clone(), self.q.clone(), self.family, fairness)
    }

    pub fn with_family(&self, family: FamilySpec) -> Result<Self> {
        Self::new(
            self.mu.clone(),
            self.q.clone(),
            family,
            self.fairness.clone(),
        )
    }

    /// Estimate-path constructor for the engine: skips validation that the
    /// template already passed.
    pub(crate) fn with_means_unchecked(&self, mu: CellMatrix) -> Self {
        let mu = mu.map(|m| self.family.clip_mean(m));
        Self {
            mu,
            q: self.q.clone(),
            family: self.family,
            fairness: self.fairness.clone(),
        }
    }

    #[inline]
    pub fn num_policies(&self) -> usize {
        self.mu.rows()
    }

    #[inline]
    pub fn num_subpops(&self) -> usize {
        self.mu.cols()
    }

    #[inline]
    pub fn means(&self) -> &CellMatrix {
        &self.mu
    }

    #[inline]
    pub fn mean(&self, k: usize, l: usize) -> f64 {
        self.mu.get(k, l)
    }

    #[inline]
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    #[inline]
    pub fn family(&self) -> &FamilySpec {
        &self.family
    }

    #[inline]
    pub fn fairness(&self) -> &FairnessSpec {
        &self.fairness
    }

    /// Threshold of a hard or penalized rule.
    pub fn c_min(&self) -> Option<f64> {
        match self.fairness {
            FairnessSpec::HardThreshold { c_min } | FairnessSpec::Penalized { c_min, .. } => {
                Some(c_min)
            }
            FairnessSpec::VarianceBall { .. } => None,
        }
    }

    fn check_policy(&self, k: usize) -> Result<()> {
        if k >= self.num_policies() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.num_policies(),
            });
        }
        Ok(())
    }

    /// Population mean `sum_l q_l mu_kl`.
    pub fn pop_mean(&self, k: usize) -> Result<f64> {
        self.check_policy(k)?;
        Ok(weighted_mean(&self.q, self.mu.row(k)))
    }

    pub fn pop_means(&self) -> Vec<f64> {
        (0..self.num_policies())
            .map(|k| weighted_mean(&self.q, self.mu.row(k)))
            .collect()
    }

    /// Shortfall-penalized population mean.
    pub fn penalized_mean(&self, k: usize) -> Result<f64> {
        self.check_policy(k)?;
        match &self.fairness {
            FairnessSpec::Penalized { c_min, gamma } => {
                Ok(penalized_value(&self.q, gamma, *c_min, self.mu.row(k)))
            }
            other => Err(Error::UnsupportedFairness(other.name())),
        }
    }

    /// Whether a row of means satisfies the hard or variance rule.
    pub fn row_is_feasible(&self, row: &[f64]) -> Result<bool> {
        match &self.fairness {
            FairnessSpec::HardThreshold { c_min } => Ok(row.iter().all(|&m| m >= *c_min)),
            FairnessSpec::VarianceBall { c_var } => Ok(dispersion(&self.q, row) <= *c_var),
            FairnessSpec::Penalized { .. } => Err(Error::UnsupportedFairness("penalized")),
        }
    }

    pub fn is_feasible(&self, k: usize) -> Result<bool> {
        self.check_policy(k)?;
        self.row_is_feasible(self.mu.row(k))
    }

    pub fn feasible_set(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for k in 0..self.num_policies() {
            if self.row_is_feasible(self.mu.row(k))? {
                out.push(k);
            }
        }
        Ok(out)
    }

    /// Best feasible policy (or penalized argmax). Ties go to the lowest index.
    pub fn best_policy(&self) -> Option<usize> {
        best_policy_of(&self.mu, &self.q, &self.fairness)
    }

    /// Membership in the identifiable instance class, with a safety `margin`
    /// on every strict inequality.
    pub fn validate_in_s(&self, margin: f64) -> Membership {
        let kk = self.num_policies();
        let means = self.pop_means();
        match &self.fairness {
            FairnessSpec::Penalized { c_min, gamma } => {
                let pen: Vec<f64> = (0..kk)
                    .map(|k| penalized_value(&self.q, gamma, *c_min, self.mu.row(k)))
                    .collect();
                let best = argmax_first(&pen);
                for k in 0..kk {
                    if k != best && pen[best] <= pen[k] + margin {
                        return Membership::NotInS(NotInClass::PenalizedTie { best, rival: k });
                    }
                }
                Membership::InS
            }
            FairnessSpec::HardThreshold { c_min } => {
                let c = *c_min;
                match self.best_policy() {
                    Some(best) => {
                        for (l, &m) in self.mu.row(best).iter().enumerate() {
                            if m <= c + margin {
                                return Membership::NotInS(NotInClass::BoundaryConstraint {
                                    policy: best,
                                    subpop: Some(l),
                                });
                            }
                        }
                        for k in 0..kk {
                            if k != best
                                && self.mu.row(k).iter().all(|&m| m >= c)
                                && means[best] <= means[k] + margin
                            {
                                return Membership::NotInS(NotInClass::NonUniqueOptimum {
                                    best,
                                    rival: k,
                                });
                            }
                        }
                        Membership::InS
                    }
                    None => {
                        for k in 0..kk {
                            if !self.mu.row(k).iter().any(|&m| m < c - margin) {
                                return Membership::NotInS(NotInClass::NotStrictlyInfeasible {
                                    policy: k,
                                });
                            }
                        }
                        Membership::InS
                    }
                }
            }
            FairnessSpec::VarianceBall { c_var } => {
                let disp: Vec<f64> = (0..kk)
                    .map(|k| dispersion(&self.q, self.mu.row(k)))
                    .collect();
                match self.best_policy() {
                    Some(best) => {
                        if disp[best] >= c_var - margin {
                            return Membership::NotInS(NotInClass::BoundaryConstraint {
                                policy: best,
                                subpop: None,
                            });
                        }
                        for k in 0..kk {
                            if k != best && disp[k] <= *c_var && means[best] <= means[k] + margin {
                                return Membership::NotInS(NotInClass::NonUniqueOptimum {
                                    best,
                                    rival: k,
                                });
                            }
                        }
                        Membership::InS
                    }
                    None => {
                        for (k, &v) in disp.iter().enumerate() {
                            if v <= c_var + margin {
                                return Membership::NotInS(NotInClass::NotStrictlyInfeasible {
                                    policy: k,
                                });
                            }
                        }
                        Membership::InS
                    }
                }
            }
        }
    }
}

#[inline]
pub fn weighted_mean(q: &[f64], row: &[f64]) -> f64 {
    q.iter().zip(row).map(|(a, b)| a * b).sum()
}

/// `sum_l (x_l - xbar)^2` with `xbar = sum_l q_l x_l`.
#[inline]
pub fn dispersion(q: &[f64], row: &[f64]) -> f64 {
    let bar = weighted_mean(q, row);
    row.iter().map(|x| (x - bar) * (x - bar)).sum()
}

#[inline]
pub fn penalized_value(q: &[f64], gamma: &[f64], c_min: f64, row: &[f64]) -> f64 {
    row.iter()
        .zip(q)
        .zip(gamma)
        .map(|((&m, &ql), &g)| ql * (m + g * (m - c_min).min(0.0)))
        .sum()
}

pub(crate) fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn best_policy_of(mu: &CellMatrix, q: &[f64], fairness: &FairnessSpec) -> Option<usize> {
    let kk = mu.rows();
    match fairness {
        FairnessSpec::Penalized { c_min, gamma } => {
            let pen: Vec<f64> = (0..kk)
                .map(|k| penalized_value(q, gamma, *c_min, mu.row(k)))
                .collect();
            Some(argmax_first(&pen))
        }
        _ => {
            let mut best: Option<(usize, f64)> = None;
            for k in 0..kk {
                let row = mu.row(k);
                let feasible = match fairness {
                    FairnessSpec::HardThreshold { c_min } => row.iter().all(|&m| m >= *c_min),
                    FairnessSpec::VarianceBall { c_var } => dispersion(q, row) <= *c_var,
                    FairnessSpec::Penalized { .. } => unreachable!(),
                };
                if feasible {
                    let m = weighted_mean(q, row);
                    if best.is_none_or(|(_, bm)| m > bm) {
                        best = Some((k, m));
                    }
                }
            }
            best.map(|(k, _)| k)
        }
    }
}
