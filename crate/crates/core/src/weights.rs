//! Outer maximization: optimal sampling proportions `w*` and `T* = 1/f*(w*)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::CellMatrix;
use crate::counterset::{f_star, infeasible_shortcut_weights};
use crate::error::{Error, Result};
use crate::instance::{FairnessSpec, Instance, Membership};
use crate::solvers::project_simplex;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    /// `alpha0 / sqrt(n)`.
    InvSqrt {
        alpha0: f64,
    },
    Constant {
        alpha: f64,
    },
    /// `alpha0 / (sqrt(n) |c|)`: the iterate moves `alpha0 / sqrt(n)` in Euclidean norm.
    Normalized {
        alpha0: f64,
    },
}

impl StepRule {
    /// Step length at iteration `n` (1-based) for a subgradient of norm `grad_norm`.
    pub fn step(&self, n: usize, grad_norm: f64) -> f64 {
        let root = (n.max(1) as f64).sqrt();
        match *self {
            StepRule::InvSqrt { alpha0 } => alpha0 / root,
            StepRule::Constant { alpha } => alpha,
            StepRule::Normalized { alpha0 } => {
                if grad_norm > 0.0 {
                    alpha0 / (root * grad_norm)
                } else {
                    0.0
                }
            }
        }
    }
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Normalized { alpha0: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub max_iters: usize,
    pub step: StepRule,
    /// Stop once the running maximum gains less than `tol` (relative) over `window` iterations.
    pub tol: f64,
    pub window: usize,
    /// Starting weights; uniform when absent.
    pub w0: Option<CellMatrix>,
    /// Return the closed-form weights when nothing is feasible.
    pub infeasible_shortcut: bool,
    pub record_history: bool,
    /// Restrict the search to weights with every entry at least this value.
    pub eps_floor: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_iters: 50_000,
            step: StepRule::default(),
            tol: 1e-7,
            window: 5000,
            eps_floor: 0.0,
            w0: None,
            infeasible_shortcut: true,
            record_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub w_star: CellMatrix,
    pub t_star: f64,
    pub f_star: f64,
    pub iterations: usize,
    /// `f*` at each iterate, when requested.
    pub history: Option<Vec<f64>>,
}

/// Projected subgradient ascent on `w -> f*(w)` over the simplex.
pub fn solve_oracle(instance: &Instance, config: &OracleConfig) -> Result<OracleSolution> {
    let kk = instance.num_policies();
    let ll = instance.num_subpops();
    if config.infeasible_shortcut
        && matches!(instance.fairness(), FairnessSpec::HardThreshold { .. })
        && instance.best_policy().is_none()
    {
        let w = infeasible_shortcut_weights(instance)?;
        let f = f_star(instance, &w)?.value;
        return Ok(OracleSolution {
            w_star: w,
            t_star: 1.0 / f,
            f_star: f,
            iterations: 0,
            history: config.record_history.then(|| vec![f]),
        });
    }
    let n_cells = (kk * ll) as f64;
    let eps = config.eps_floor;
    if !(eps >= 0.0) || eps * n_cells >= 1.0 {
        return Err(Error::invalid(format!(
            "eps_floor {eps} leaves no room on {n_cells} cells"
        )));
    }
    // Euclidean projection onto {w in simplex : w >= eps} by an affine change of variables
    let project = |x: &[f64]| -> Vec<f64> {
        if eps == 0.0 {
            return project_simplex(x);
        }
        let scale = 1.0 - eps * n_cells;
        let shifted: Vec<f64> = x.iter().map(|v| (v - eps) / scale).collect();
        project_simplex(&shifted)
            .iter()
            .map(|v| eps + scale * v)
            .collect()
    };
    let mut w = match &config.w0 {
        Some(w0) => {
            if w0.rows() != kk || w0.cols() != ll {
                return Err(Error::invalid("w0 shape does not match the instance"));
            }
            CellMatrix::from_row_major(kk, ll, project(w0.as_slice()))
        }
        None => CellMatrix::filled(kk, ll, 1.0 / n_cells),
    };
    let mut best_w = w.clone();
    let mut best_f = f64::NEG_INFINITY;
    let mut history = config.record_history.then(Vec::new);
    let mut running: Vec<f64> = Vec::with_capacity(config.max_iters.min(1 << 20));
    let mut iterations = 0;
    for n in 1..=config.max_iters {
        iterations = n;
        let eval = f_star(instance, &w)?;
        if let Some(h) = history.as_mut() {
            h.push(eval.value);
        }
        if eval.subgrad.as_slice().iter().any(|c| !c.is_finite()) || !eval.value.is_finite() {
            return Err(Error::NonFiniteSubgradient(n));
        }
        if eval.value > best_f {
            best_f = eval.value;
            best_w.clone_from(&w);
        }
        running.push(best_f);
        if n > config.window {
            let old = running[n - 1 - config.window];
            if best_f - old <= config.tol * best_f.abs() {
                break;
            }
        }
        let norm = eval
            .subgrad
            .as_slice()
            .iter()
            .map(|c| c * c)
            .sum::<f64>()
            .sqrt();
        let alpha = config.step.step(n, norm);
        let moved: Vec<f64> = w
            .as_slice()
            .iter()
            .zip(eval.subgrad.as_slice())
            .map(|(x, c)| x + alpha * c)
            .collect();
        w = CellMatrix::from_row_major(kk, ll, project(&moved));
    }
    if !(best_f > 0.0) {
        return Err(Error::UnboundedObjective);
    }
    Ok(OracleSolution {
        w_star: best_w,
        t_star: 1.0 / best_f,
        f_star: best_f,
        iterations,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub gamma: f64,
    /// `None` when the penalized leader is not unique (T* is infinite there).
    pub t_star: Option<f64>,
    pub best_policy: Option<usize>,
    pub near_tie: bool,
}

/// Margin on penalized gaps below which a sweep point is flagged.
pub const GAMMA_TIE_MARGIN: f64 = 1e-6;

/// `T*` of the penalized problem for each uniform penalty in `gammas`.
pub fn tstar_gamma_sweep(
    instance: &Instance,
    gammas: &[f64],
    config: &OracleConfig,
) -> Result<Vec<GammaPoint>> {
    let c_min = instance
        .c_min()
        .ok_or(Error::UnsupportedFairness(instance.fairness().name()))?;
    let ll = instance.num_subpops();
    gammas
        .par_iter()
        .map(|&gamma| {
            let inst = instance.with_fairness(FairnessSpec::Penalized {
                c_min,
                gamma: vec![gamma; ll],
            })?;
            let best = inst.best_policy();
            if let Membership::NotInS(_) = inst.validate_in_s(GAMMA_TIE_MARGIN) {
                return Ok(GammaPoint {
                    gamma,
                    t_star: None,
                    best_policy: best,
                    near_tie: true,
                });
            }
            let sol = solve_oracle(&inst, config)?;
            Ok(GammaPoint {
                gamma,
                t_star: Some(sol.t_star),
                best_policy: best,
                near_tie: false,
            })
        })
        .collect()
}

/// Binary relative entropy `kl(delta, 1 - delta)`.
pub fn kl_delta(delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let r = ((1.0 - delta) / delta).ln();
    Ok((1.0 - 2.0 * delta) * r)
}

/// Finite-confidence lower bound `T* kl(delta, 1 - delta)` on the expected stopping time.
pub fn finite_delta_bound(t_star: f64, delta: f64) -> Result<f64> {
    Ok(t_star * kl_delta(delta)?)
}
