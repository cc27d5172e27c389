//! Deterministic optimization primitives: simplex projections, the linearly
//! coupled KL subproblem, and the variance-ball subproblems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfamily::{FamilyKind, FamilySpec};

/// Floor applied to weights inside the solvers.
pub const WEIGHT_FLOOR: f64 = 1e-12;

const ETA_CAP: f64 = 1152921504606846976.0; // 2^60
const DUAL_MAX_ITERS: usize = 200;

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sorted = x.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cum += v;
        let t = (cum - 1.0) / (i + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = x.iter().map(|&v| (v - theta).max(0.0)).collect();
    let s: f64 = out.iter().sum();
    if s > 0.0 && (s - 1.0).abs() > 1e-15 {
        out.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// How mass is moved when lifting entries to the floor `eps`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsProjection {
    /// `x_i = max(eps, w_i - theta)`: minimizes `max_i |x_i - w_i|`.
    #[default]
    LInfinity,
    /// Raise to `eps`, then remove the surplus in proportion to `w_i - eps`.
    Proportional,
}

/// Projection of a simplex point onto `{x in simplex : x_i >= eps}`.
pub fn project_eps_simplex(w: &[f64], eps: f64, rule: EpsProjection) -> Result<Vec<f64>> {
    let n = w.len() as f64;
    if !(eps >= 0.0) || eps * n >= 1.0 {
        return Err(Error::invalid(format!(
            "eps = {eps} invalid for {} cells",
            w.len()
        )));
    }
    if w.iter().all(|&v| v >= eps) {
        return Ok(w.to_vec());
    }
    match rule {
        EpsProjection::LInfinity => {
            // sum_i max(eps, w_i - theta) = 1 is decreasing in theta
            // piecewise linear between the breakpoints w_i - eps
            let total = |theta: f64| w.iter().map(|&v| (v - theta).max(eps)).sum::<f64>();
            let mut breaks: Vec<f64> = w.iter().map(|&v| v - eps).filter(|&b| b > 0.0).collect();
            breaks.sort_unstable_by(f64::total_cmp);
            let mut lo = 0.0;
            let mut theta = 0.0;
            if total(0.0) > 1.0 {
                for &b in &breaks {
                    if total(b) <= 1.0 {
                        let active: Vec<f64> =
                            w.iter().cloned().filter(|&v| v - eps >= b).collect();
                        let floored = (w.len() - active.len()) as f64;
                        let t = (active.iter().sum::<f64>() + floored * eps - 1.0)
                            / active.len() as f64;
                        theta = t.clamp(lo, b);
                        break;
                    }
                    lo = b;
                }
            }
            Ok(w.iter().map(|&v| (v - theta).max(eps)).collect())
        }
        EpsProjection::Proportional => {
            let surplus: f64 = w.iter().map(|&v| (eps - v).max(0.0)).sum();
            let slack: f64 = w.iter().map(|&v| (v - eps).max(0.0)).sum();
            Ok(w.iter()
                .map(|&v| {
                    if v <= eps {
                        eps
                    } else {
                        v - surplus * (v - eps) / slack
                    }
                })
                .collect())
        }
    }
}

/// One coordinate of the coupled problem
/// `min sum_i weight_i d(mu_i, x_i)  s.t.  sum_i coef_i x_i >= rhs, lower_i <= x_i <= upper_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoupledCell {
    pub mu: f64,
    pub weight: f64,
    pub coef: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DualMethod {
    /// Exact breakpoint scan for Gaussian, bisection otherwise.
    #[default]
    Auto,
    Bisection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSolution {
    pub lambda: Vec<f64>,
    pub value: f64,
    pub eta: f64,
    /// `(eta, gap)` pairs evaluated by the dual search, in evaluation order.
    pub trace: Vec<(f64, f64)>,
}

struct Prepared {
    mu: f64,
    weight: f64,
    actual_weight: f64,
    coef: f64,
    lo: f64,
    hi: f64,
}

fn prepare(family: &FamilySpec, cells: &[CoupledCell]) -> Result<Vec<Prepared>> {
    let (dlo, dhi) = family.domain();
    cells
        .iter()
        .map(|c| {
            if !(c.mu.is_finite() && c.weight.is_finite() && c.coef.is_finite()) || c.weight < 0.0 {
                return Err(Error::invalid(format!("bad coupled cell {c:?}")));
            }
            if c.lower.is_nan() || c.upper.is_nan() {
                return Err(Error::invalid("NaN bound"));
            }
            let lo = c.lower.max(dlo);
            let hi = c.upper.min(dhi);
            if lo > hi {
                return Err(Error::InfeasibleSubproblem(format!(
                    "box [{}, {}] is empty within the family domain",
                    c.lower, c.upper
                )));
            }
            Ok(Prepared {
                mu: family.clip_mean(c.mu),
                weight: c.weight.max(WEIGHT_FLOOR),
                actual_weight: c.weight,
                coef: c.coef,
                lo,
                hi,
            })
        })
        .collect()
}

fn coordinate(family: &FamilySpec, p: &Prepared, eta: f64) -> f64 {
    family
        .argmin_in(p.mu, p.weight, -eta * p.coef, p.lo, p.hi)
        .expect("weight is floored and bounds are finite where needed")
}

fn lambdas_at(family: &FamilySpec, cells: &[Prepared], eta: f64) -> Vec<f64> {
    cells.iter().map(|p| coordinate(family, p, eta)).collect()
}

fn gap_of(cells: &[Prepared], lambda: &[f64], rhs: f64) -> f64 {
    cells
        .iter()
        .zip(lambda)
        .map(|(p, x)| p.coef * x)
        .sum::<f64>()
        - rhs
}

fn finish(
    family: &FamilySpec,
    cells: &[Prepared],
    lambda: Vec<f64>,
    eta: f64,
    trace: Vec<(f64, f64)>,
) -> CoupledSolution {
    let value = cells
        .iter()
        .zip(&lambda)
        .map(|(p, &x)| p.actual_weight * family.kl_unchecked(p.mu, x))
        .sum();
    CoupledSolution {
        lambda,
        value,
        eta,
        trace,
    }
}

/// Solve the linearly coupled problem described on [`CoupledCell`].
pub fn solve_linear_coupled(
    family: &FamilySpec,
    cells: &[CoupledCell],
    rhs: f64,
) -> Result<CoupledSolution> {
    solve_linear_coupled_with(family, cells, rhs, DualMethod::Auto)
}

pub fn solve_linear_coupled_with(
    family: &FamilySpec,
    cells: &[CoupledCell],
    rhs: f64,
    method: DualMethod,
) -> Result<CoupledSolution> {
    if !rhs.is_finite() {
        return Err(Error::invalid("rhs must be finite"));
    }
    let cells = prepare(family, cells)?;
    let sup: f64 = cells
        .iter()
        .map(|p| {
            if p.coef > 0.0 {
                p.coef * p.hi
            } else if p.coef < 0.0 {
                p.coef * p.lo
            } else {
                0.0
            }
        })
        .sum();
    if sup < rhs {
        return Err(Error::InfeasibleSubproblem(format!(
            "coupling constraint unreachable: sup {sup} < rhs {rhs}"
        )));
    }
    let lam0 = lambdas_at(family, &cells, 0.0);
    let g0 = gap_of(&cells, &lam0, rhs);
    if g0 >= 0.0 {
        return Ok(finish(family, &cells, lam0, 0.0, vec![(0.0, g0)]));
    }
    match (family.kind, method) {
        (FamilyKind::GaussianKnownVariance, DualMethod::Auto) => {
            gaussian_scan(family, &cells, rhs, g0)
        }
        _ => dual_bisection(family, &cells, rhs, g0),
    }
}

/// Gaussian coordinates are piecewise linear in eta; walk the breakpoints.
fn gaussian_scan(
    family: &FamilySpec,
    cells: &[Prepared],
    rhs: f64,
    g0: f64,
) -> Result<CoupledSolution> {
    let s2 = family.sigma * family.sigma;
    let mut breaks: Vec<f64> = Vec::with_capacity(2 * cells.len());
    for p in cells {
        if p.coef == 0.0 {
            continue;
        }
        let rate = p.coef * s2 / p.weight;
        for bound in [p.lo, p.hi] {
            if bound.is_finite() {
                let e = (bound - p.mu) / rate;
                if e > 0.0 && e.is_finite() {
                    breaks.push(e);
                }
            }
        }
    }
    breaks.sort_unstable_by(f64::total_cmp);
    breaks.dedup();
    let mut trace = vec![(0.0, g0)];
    let (mut e_prev, mut g_prev) = (0.0, g0);
    for &b in &breaks {
        let g = gap_of(cells, &lambdas_at(family, cells, b), rhs);
        trace.push((b, g));
        if g >= 0.0 {
            let eta = if g > g_prev {
                e_prev + (-g_prev) * (b - e_prev) / (g - g_prev)
            } else {
                b
            };
            return Ok(gaussian_finish(family, cells, rhs, eta, b, trace));
        }
        e_prev = b;
        g_prev = g;
    }
    // past the last breakpoint the gap is linear with this slope
    // no breakpoints remain, so the gap is affine from here on
    let probe = e_prev + 1.0;
    let slope = gap_of(cells, &lambdas_at(family, cells, probe), rhs) - g_prev;
    if slope <= 0.0 {
        return Err(Error::InfeasibleSubproblem(
            "coupling gap cannot close".into(),
        ));
    }
    let eta = e_prev - g_prev / slope;
    Ok(gaussian_finish(
        family,
        cells,
        rhs,
        eta,
        f64::INFINITY,
        trace,
    ))
}

/// Evaluate at `eta`; if rounding leaves a negative gap, nudge toward `upper`.
fn gaussian_finish(
    family: &FamilySpec,
    cells: &[Prepared],
    rhs: f64,
    eta: f64,
    upper: f64,
    mut trace: Vec<(f64, f64)>,
) -> CoupledSolution {
    let mut eta = eta;
    let mut lam = lambdas_at(family, cells, eta);
    let mut g = gap_of(cells, &lam, rhs);
    let mut step = eta.abs().max(1e-300) * 4.0 * f64::EPSILON;
    for _ in 0..64 {
        if g >= 0.0 {
            break;
        }
        let next = (eta + step).min(upper);
        if next <= eta {
            break;
        }
        eta = next;
        step *= 2.0;
        lam = lambdas_at(family, cells, eta);
        g = gap_of(cells, &lam, rhs);
    }
    trace.push((eta, g));
    finish(family, cells, lam, eta, trace)
}

fn dual_bisection(
    family: &FamilySpec,
    cells: &[Prepared],
    rhs: f64,
    g0: f64,
) -> Result<CoupledSolution> {
    let mut trace = vec![(0.0, g0)];
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut lam_hi;
    loop {
        lam_hi = lambdas_at(family, cells, hi);
        let g = gap_of(cells, &lam_hi, rhs);
        trace.push((hi, g));
        if g >= 0.0 {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > ETA_CAP {
            return Err(Error::InfeasibleSubproblem(
                "dual bracket exceeded 2^60".into(),
            ));
        }
    }
    let scale: f64 = cells.iter().map(|p| p.coef.abs()).sum::<f64>().max(1e-300);
    for _ in 0..DUAL_MAX_ITERS {
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let lam = lambdas_at(family, cells, mid);
        let g = gap_of(cells, &lam, rhs);
        trace.push((mid, g));
        if g >= 0.0 {
            hi = mid;
            lam_hi = lam;
            if g <= 1e-14 * scale {
                break;
            }
        } else {
            lo = mid;
        }
    }
    Ok(finish(family, cells, lam_hi, hi, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSolution {
    pub lambda1: Vec<f64>,
    pub lambdak: Vec<f64>,
    pub value: f64,
}

/// Move arms `1` and `k` so that `q . lambda_k >= q . lambda_1`, with
/// `lambda_k >= box_low_k` coordinate-wise.
#[allow(clippy::too_many_arguments)]
pub fn solve_coupled_pair(
    family: &FamilySpec,
    mu1: &[f64],
    muk: &[f64],
    w1: &[f64],
    wk: &[f64],
    q: &[f64],
    box_low_k: &[f64],
) -> Result<PairSolution> {
    solve_coupled_pair_with(family, mu1, muk, w1, wk, q, box_low_k, DualMethod::Auto)
}

#[allow(clippy::too_many_arguments)]
pub fn solve_coupled_pair_with(
    family: &FamilySpec,
    mu1: &[f64],
    muk: &[f64],
    w1: &[f64],
    wk: &[f64],
    q: &[f64],
    box_low_k: &[f64],
    method: DualMethod,
) -> Result<PairSolution> {
    let l = q.len();
    if [mu1.len(), muk.len(), w1.len(), wk.len(), box_low_k.len()]
        .iter()
        .any(|&n| n != l)
    {
        return Err(Error::invalid("coupled pair: length mismatch"));
    }
    let mut cells = Vec::with_capacity(2 * l);
    for i in 0..l {
        cells.push(CoupledCell {
            mu: mu1[i],
            weight: w1[i],
            coef: -q[i],
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        });
    }
    for i in 0..l {
        cells.push(CoupledCell {
            mu: muk[i],
            weight: wk[i],
            coef: q[i],
            lower: box_low_k[i],
            upper: f64::INFINITY,
        });
    }
    let sol = solve_linear_coupled_with(family, &cells, 0.0, method)?;
    let (a, b) = sol.lambda.split_at(l);
    Ok(PairSolution {
        lambda1: a.to_vec(),
        lambdak: b.to_vec(),
        value: sol.value,
    })
}

/// Matrix `A` with `x^T A x = sum_l (x_l - q.x)^2`.
pub fn variance_form(q: &[f64]) -> DMatrix<f64> {
    let l = q.len();
    DMatrix::from_fn(l, l, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - q[i] - q[j] + l as f64 * q[i] * q[j]
    })
}

fn quad(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = DVector::from_column_slice(x);
    v.dot(&(a * &v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallSolution {
    pub lambda: Vec<f64>,
    pub value: f64,
}

fn weighted_cost(family: &FamilySpec, mu: &[f64], w: &[f64], lambda: &[f64]) -> f64 {
    mu.iter()
        .zip(w)
        .zip(lambda)
        .map(|((&m, &wi), &x)| wi * family.kl_unchecked(m, x))
        .sum()
}

fn check_ball_args(mu: &[f64], w: &[f64], q: &[f64], c_var: f64) -> Result<()> {
    if mu.len() != q.len() || w.len() != q.len() {
        return Err(Error::invalid("variance solver: length mismatch"));
    }
    if !(c_var.is_finite() && c_var > 0.0) {
        return Err(Error::invalid("c_var must be > 0"));
    }
    Ok(())
}

/// Cheapest way to push a row out of the variance ball:
/// `min sum_l w_l d(mu_l, x_l)  s.t.  sum_l (x_l - q.x)^2 >= c_var`.
pub fn solve_variance_exit(
    family: &FamilySpec,
    mu: &[f64],
    w: &[f64],
    q: &[f64],
    c_var: f64,
) -> Result<BallSolution> {
    check_ball_args(mu, w, q, c_var)?;
    let a = variance_form(q);
    let mu: Vec<f64> = mu.iter().map(|&m| family.clip_mean(m)).collect();
    if quad(&a, &mu) >= c_var {
        return Ok(BallSolution {
            lambda: mu,
            value: 0.0,
        });
    }
    if q.len() < 2 {
        return Err(Error::InfeasibleSubproblem(
            "a single subpopulation has zero dispersion".into(),
        ));
    }
    let wf: Vec<f64> = w.iter().map(|&x| x.max(WEIGHT_FLOOR)).collect();
    let lambda = match family.kind {
        FamilyKind::GaussianKnownVariance => {
            let s2 = family.sigma * family.sigma;
            let d: Vec<f64> = wf.iter().map(|x| x / s2).collect();
            let cands = gaussian_exit_candidates(&d, &mu, &a, c_var);
            let mut best: Option<(f64, Vec<f64>)> = None;
            for (x, nu) in cands {
                let x = kkt_polish_exit(family, &mu, &wf, &a, c_var, x, nu);
                let cost = weighted_cost(family, &mu, &wf, &x);
                if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                    best = Some((cost, x));
                }
            }
            best.expect("at least one candidate").1
        }
        FamilyKind::Bernoulli => bernoulli_exit(family, &mu, &wf, &a, c_var)?,
    };
    let value = weighted_cost(family, &mu, w, &lambda);
    Ok(BallSolution { lambda, value })
}

/// Symmetric eigen-decomposition of `D^{-1/2} A D^{-1/2}`.
fn scaled_eigen(d: &[f64], a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let l = d.len();
    let m = DMatrix::from_fn(l, l, |i, j| a[(i, j)] / (d[i] * d[j]).sqrt());
    let eig = m.symmetric_eigen();
    (eig.eigenvalues.iter().cloned().collect(), eig.eigenvectors)
}

/// Global solutions of the quadratic exit problem with curvatures `d`,
/// returned with their multiplier. Two mirror candidates in the hard case.
fn gaussian_exit_candidates(
    d: &[f64],
    mu: &[f64],
    a: &DMatrix<f64>,
    c: f64,
) -> Vec<(Vec<f64>, f64)> {
    let l = d.len();
    let (m, u) = scaled_eigen(d, a);
    let m_max = m.iter().cloned().fold(0.0, f64::max);
    let b = DVector::from_iterator(l, (0..l).map(|i| d[i].sqrt() * mu[i]));
    let beta = u.transpose() * &b;
    let top: Vec<bool> = m.iter().map(|&x| x >= m_max * (1.0 - 1e-10)).collect();
    // t = 1 - 2 nu m_max in (0, 1]
    let v_at = |t: f64| -> f64 {
        (0..l)
            .map(|i| {
                let den = 1.0 - (1.0 - t) * m[i] / m_max;
                m[i] * beta[i] * beta[i] / (den * den)
            })
            .sum()
    };
    let to_lambda = |y: &DVector<f64>| -> Vec<f64> {
        let z = &u * y;
        (0..l).map(|i| z[i] / d[i].sqrt()).collect()
    };
    let beta_top: f64 = (0..l).filter(|&i| top[i]).map(|i| beta[i] * beta[i]).sum();
    let t_min = 1e-13;
    if beta_top > 0.0 && v_at(t_min) >= c {
        let (mut lo, mut hi) = (t_min.ln(), 0.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if v_at(mid.exp()) >= c {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        let t = lo.exp();
        let y = DVector::from_iterator(
            l,
            (0..l).map(|i| beta[i] / (1.0 - (1.0 - t) * m[i] / m_max)),
        );
        let nu = (1.0 - t) / (2.0 * m_max);
        return vec![(to_lambda(&y), nu)];
    }
    // hard case: the multiplier sits at the top eigenvalue
    let mut y = DVector::zeros(l);
    let mut v_rest = 0.0;
    for i in 0..l {
        if !top[i] {
            y[i] = beta[i] / (1.0 - m[i] / m_max);
            v_rest += m[i] * y[i] * y[i];
        }
    }
    let tau = ((c - v_rest).max(0.0) / m_max).sqrt();
    let dir: DVector<f64> = if beta_top > 0.0 {
        let mut v = DVector::zeros(l);
        for i in 0..l {
            if top[i] {
                v[i] = beta[i];
            }
        }
        v.normalize()
    } else {
        let first = (0..l).find(|&i| top[i]).expect("nonempty top group");
        let mut v = DVector::zeros(l);
        v[first] = 1.0;
        v
    };
    let nu = 1.0 / (2.0 * m_max);
    let plus = &y + &dir * tau;
    let minus = &y - &dir * tau;
    vec![(to_lambda(&plus), nu), (to_lambda(&minus), nu)]
}

/// Newton on the exit KKT system `w d'(x) = 2 nu A x`, `x^T A x = c`, then
/// a radial rescale onto the boundary. Keeps the start if Newton stalls.
fn kkt_polish_exit(
    family: &FamilySpec,
    mu: &[f64],
    w: &[f64],
    a: &DMatrix<f64>,
    c: f64,
    x0: Vec<f64>,
    nu0: f64,
) -> Vec<f64> {
    let l = mu.len();
    let (dlo, dhi) = family.domain();
    let resid = |x: &[f64], nu: f64| -> DVector<f64> {
        let ax = a * DVector::from_column_slice(x);
        let mut r = DVector::zeros(l + 1);
        for i in 0..l {
            r[i] = w[i] * family.kl_grad(mu[i], x[i]) - 2.0 * nu * ax[i];
        }
        r[l] = quad(a, x) - c;
        r
    };
    let mut x = x0.clone();
    let mut nu = nu0;
    let mut r = resid(&x, nu);
    for _ in 0..40 {
        let rn = r.norm();
        if rn < 1e-14 * (1.0 + c) {
            break;
        }
        let ax = a * DVector::from_column_slice(&x);
        let mut jac = DMatrix::zeros(l + 1, l + 1);
        for i in 0..l {
            for j in 0..l {
                jac[(i, j)] = -2.0 * nu * a[(i, j)];
            }
            jac[(i, i)] += w[i] * family.kl_hess(mu[i], x[i]);
            jac[(i, l)] = -2.0 * ax[i];
            jac[(l, i)] = 2.0 * ax[i];
        }
        let Some(step) = jac.lu().solve(&(-&r)) else {
            break;
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let nx: Vec<f64> = (0..l).map(|i| x[i] + t * step[i]).collect();
            let nnu = nu + t * step[l];
            if nx.iter().all(|&v| v > dlo && v < dhi) && nnu >= 0.0 {
                let nr = resid(&nx, nnu);
                if nr.norm() < rn {
                    x = nx;
                    nu = nnu;
                    r = nr;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let start = radial_to_boundary(family, a, c, x0);
    let polished = radial_to_boundary(family, a, c, x);
    if weighted_cost(family, mu, w, &polished) <= weighted_cost(family, mu, w, &start) {
        polished
    } else {
        start
    }
}

/// Scale deviations from the weighted mean so that `x^T A x = c`.
fn radial_to_boundary(family: &FamilySpec, a: &DMatrix<f64>, c: f64, x: Vec<f64>) -> Vec<f64> {
    let v = quad(a, &x);
    if v <= 0.0 || (v - c).abs() <= 1e-15 * c {
        return x;
    }
    let (dlo, dhi) = family.domain();
    // A annihilates constants, so any center works; use the plain mean.
    let center = x.iter().sum::<f64>() / x.len() as f64;
    let s = (c / v).sqrt();
    x.iter()
        .map(|&xi| (center + s * (xi - center)).clamp(dlo, dhi))
        .collect()
}

/// Projected Newton on a box for a smooth function with a positive definite
/// Hessian model.
fn minimize_box(
    mut x: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    f: &dyn Fn(&[f64]) -> f64,
    grad: &dyn Fn(&[f64]) -> Vec<f64>,
    hess: &dyn Fn(&[f64]) -> DMatrix<f64>,
    max_iter: usize,
) -> Vec<f64> {
    let n = x.len();
    for i in 0..n {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
    let mut fx = f(&x);
    for _ in 0..max_iter {
        let g = grad(&x);
        let free: Vec<usize> = (0..n)
            .filter(|&i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        if free.is_empty() {
            break;
        }
        let gnorm: f64 = free.iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt();
        if gnorm < 1e-13 {
            break;
        }
        let h = hess(&x);
        let hf = DMatrix::from_fn(free.len(), free.len(), |i, j| h[(free[i], free[j])]);
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| -g[i]));
        let dir = match hf.clone().cholesky() {
            Some(ch) => ch.solve(&gf),
            None => {
                let shift = hf.diagonal().abs().max().max(1.0) * 1e-8;
                let mut hs = hf;
                for i in 0..free.len() {
                    hs[(i, i)] += shift;
                }
                match hs.cholesky() {
                    Some(ch) => ch.solve(&gf),
                    None => gf,
                }
            }
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let mut nx = x.clone();
            for (k, &i) in free.iter().enumerate() {
                nx[i] = (x[i] + t * dir[k]).clamp(lo[i], hi[i]);
            }
            let fnx = f(&nx);
            let decrease: f64 = (0..n).map(|i| g[i] * (nx[i] - x[i])).sum();
            if fnx <= fx + 1e-4 * decrease.min(0.0) && fnx.is_finite() {
                let step: f64 = (0..n).map(|i| (nx[i] - x[i]).abs()).fold(0.0, f64::max);
                moved = step > 0.0;
                x = nx;
                fx = fnx;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

fn bernoulli_exit(
    family: &FamilySpec,
    mu: &[f64],
    w: &[f64],
    a: &DMatrix<f64>,
    c: f64,
) -> Result<Vec<f64>> {
    let l = mu.len();
    let (dlo, dhi) = family.domain();
    if l <= 16 {
        let mut best = 0.0f64;
        for mask in 0..(1u32 << l) {
            let v: Vec<f64> = (0..l)
                .map(|i| if mask >> i & 1 == 1 { dhi } else { dlo })
                .collect();
            best = best.max(quad(a, &v));
        }
        if best < c {
            return Err(Error::InfeasibleSubproblem(format!(
                "dispersion {c} unreachable inside the Bernoulli domain (max {best})"
            )));
        }
    }
    let curv: Vec<f64> = (0..l)
        .map(|i| w[i] * family.kl_hess(mu[i], mu[i]))
        .collect();
    let mut starts: Vec<(Vec<f64>, f64)> = gaussian_exit_candidates(&curv, mu, a, c);
    let (m, u) = scaled_eigen(&curv, a);
    for (j, &mj) in m.iter().enumerate() {
        if mj <= 1e-12 * m.iter().cloned().fold(0.0, f64::max) {
            continue;
        }
        for sign in [1.0, -1.0] {
            let dir: Vec<f64> = (0..l).map(|i| sign * u[(i, j)] / curv[i].sqrt()).collect();
            let dv = quad(a, &dir);
            if dv > 0.0 {
                let s = (c / dv).sqrt();
                starts.push(((0..l).map(|i| mu[i] + s * dir[i]).collect(), 0.0));
            }
        }
    }
    let lo = vec![dlo; l];
    let hi = vec![dhi; l];
    let wsum: f64 = w.iter().sum();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for (x0, nu0) in starts {
        let mut x = x0;
        let mut rho = 10.0 * wsum / (c * c);
        for _ in 0..6 {
            let f = |x: &[f64]| {
                let short = (c - quad(a, x)).max(0.0);
                weighted_cost(family, mu, w, x) + 0.5 * rho * short * short
            };
            let grad = |x: &[f64]| {
                let short = (c - quad(a, x)).max(0.0);
                let ax = a * DVector::from_column_slice(x);
                (0..l)
                    .map(|i| w[i] * family.kl_grad(mu[i], x[i]) - 2.0 * rho * short * ax[i])
                    .collect()
            };
            let hess = |x: &[f64]| {
                let short = (c - quad(a, x)).max(0.0);
                let ax = a * DVector::from_column_slice(x);
                DMatrix::from_fn(l, l, |i, j| {
                    let diag = if i == j {
                        w[i] * family.kl_hess(mu[i], x[i])
                    } else {
                        0.0
                    };
                    let gn = if short > 0.0 {
                        4.0 * rho * ax[i] * ax[j]
                    } else {
                        0.0
                    };
                    diag + gn
                })
            };
            x = minimize_box(x, &lo, &hi, &f, &grad, &hess, 100);
            rho *= 10.0;
        }
        let ax = a * DVector::from_column_slice(&x);
        let axn = ax.norm_squared();
        let nu = if axn > 0.0 {
            (0..l)
                .map(|i| w[i] * family.kl_grad(mu[i], x[i]) * ax[i])
                .sum::<f64>()
                / (2.0 * axn)
        } else {
            nu0
        };
        let x = kkt_polish_exit(family, mu, w, a, c, x, nu.max(0.0));
        if quad(a, &x) < c * (1.0 - 1e-9) {
            continue;
        }
        let cost = weighted_cost(family, mu, w, &x);
        if best.as_ref().is_none_or(|(b, _)| cost < *b) {
            best = Some((cost, x));
        }
    }
    best.map(|(_, x)| x).ok_or_else(|| {
        Error::InfeasibleSubproblem("variance exit: no candidate reached the boundary".into())
    })
}

/// Cheapest way to bring a row into the ball with an extra linear term:
/// `min sum_l w_l d(mu_l, x_l) + s . x  s.t.  x^T A x <= c`.
fn ball_enter_linear(
    family: &FamilySpec,
    mu: &[f64],
    w: &[f64],
    s: &[f64],
    a: &DMatrix<f64>,
    c: f64,
    warm: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let l = mu.len();
    let (dlo, dhi) = family.domain();
    let free: Vec<f64> = (0..l)
        .map(|i| family.argmin_in(mu[i], w[i], s[i], dlo, dhi))
        .collect::<Result<_>>()?;
    if quad(a, &free) <= c {
        return Ok(free);
    }
    // lambda(nu) minimizes the Lagrangian with penalty nu x^T A x
    let solve_nu = |nu: f64, start: &[f64]| -> Vec<f64> {
        match family.kind {
            FamilyKind::GaussianKnownVariance => {
                let s2 = family.sigma * family.sigma;
                let mut m = a * (2.0 * nu);
                let mut rhs = DVector::zeros(l);
                for i in 0..l {
                    let d = w[i] / s2;
                    m[(i, i)] += d;
                    rhs[i] = d * mu[i] - s[i];
                }
                let sol = m
                    .clone()
                    .cholesky()
                    .map(|ch| ch.solve(&rhs))
                    .or_else(|| m.lu().solve(&rhs));
                sol.map(|v| v.iter().cloned().collect())
                    .unwrap_or_else(|| start.to_vec())
            }
            FamilyKind::Bernoulli => {
                let f = |x: &[f64]| {
                    weighted_cost(family, mu, w, x)
                        + s.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                        + nu * quad(a, x)
                };
                let grad = |x: &[f64]| {
                    let ax = a * DVector::from_column_slice(x);
                    (0..l)
                        .map(|i| w[i] * family.kl_grad(mu[i], x[i]) + s[i] + 2.0 * nu * ax[i])
                        .collect()
                };
                let hess = |x: &[f64]| {
                    DMatrix::from_fn(l, l, |i, j| {
                        2.0 * nu * a[(i, j)]
                            + if i == j {
                                w[i] * family.kl_hess(mu[i], x[i])
                            } else {
                                0.0
                            }
                    })
                };
                minimize_box(
                    start.to_vec(),
                    &vec![dlo; l],
                    &vec![dhi; l],
                    &f,
                    &grad,
                    &hess,
                    100,
                )
            }
        }
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut x_hi = solve_nu(hi, warm.unwrap_or(&free));
    while quad(a, &x_hi) > c {
        lo = hi;
        hi *= 2.0;
        if hi > ETA_CAP {
            return Err(Error::InfeasibleSubproblem(
                "variance ball multiplier diverged".into(),
            ));
        }
        x_hi = solve_nu(hi, &x_hi);
    }
    for _ in 0..DUAL_MAX_ITERS {
        if hi - lo <= 1e-14 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let x = solve_nu(mid, &x_hi);
        let v = quad(a, &x);
        if v <= c {
            hi = mid;
            x_hi = x;
            if v >= c * (1.0 - 1e-12) {
                break;
            }
        } else {
            lo = mid;
        }
    }
    Ok(x_hi)
}

/// Cheapest way to bring a row into the ball: `x^T A x <= c_var`.
pub fn solve_variance_enter(
    family: &FamilySpec,
    mu: &[f64],
    w: &[f64],
    q: &[f64],
    c_var: f64,
) -> Result<BallSolution> {
    check_ball_args(mu, w, q, c_var)?;
    let a = variance_form(q);
    let mu: Vec<f64> = mu.iter().map(|&m| family.clip_mean(m)).collect();
    let wf: Vec<f64> = w.iter().map(|&x| x.max(WEIGHT_FLOOR)).collect();
    let zero = vec![0.0; mu.len()];
    let lambda = ball_enter_linear(family, &mu, &wf, &zero, &a, c_var, None)?;
    let value = weighted_cost(family, &mu, w, &lambda);
    Ok(BallSolution { lambda, value })
}

/// Coupled pair under the variance rule: `q . lambda_k >= q . lambda_1` and
/// `lambda_k` inside the ball.
#[allow(clippy::too_many_arguments)]
pub fn solve_variance_pair(
    family: &FamilySpec,
    mu1: &[f64],
    muk: &[f64],
    w1: &[f64],
    wk: &[f64],
    q: &[f64],
    c_var: f64,
) -> Result<PairSolution> {
    check_ball_args(mu1, w1, q, c_var)?;
    check_ball_args(muk, wk, q, c_var)?;
    let l = q.len();
    let a = variance_form(q);
    let (dlo, dhi) = family.domain();
    let m1: Vec<f64> = mu1.iter().map(|&m| family.clip_mean(m)).collect();
    let mk: Vec<f64> = muk.iter().map(|&m| family.clip_mean(m)).collect();
    let w1f: Vec<f64> = w1.iter().map(|&x| x.max(WEIGHT_FLOOR)).collect();
    let wkf: Vec<f64> = wk.iter().map(|&x| x.max(WEIGHT_FLOOR)).collect();
    let dot = |x: &[f64]| q.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    let eval = |eta: f64, warm: Option<&[f64]>| -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let x1: Vec<f64> = (0..l)
            .map(|i| family.argmin_in(m1[i], w1f[i], eta * q[i], dlo, dhi))
            .collect::<Result<_>>()?;
        let s: Vec<f64> = q.iter().map(|&qi| -eta * qi).collect();
        let xk = ball_enter_linear(family, &mk, &wkf, &s, &a, c_var, warm)?;
        let gap = dot(&xk) - dot(&x1);
        Ok((x1, xk, gap))
    };
    let (mut x1, mut xk, g0) = eval(0.0, None)?;
    if g0 < 0.0 {
        let mut lo = 0.0;
        let mut hi = 1.0;
        loop {
            let (a1, ak, g) = eval(hi, Some(&xk))?;
            x1 = a1;
            xk = ak;
            if g >= 0.0 {
                break;
            }
            lo = hi;
            hi *= 2.0;
            if hi > ETA_CAP {
                return Err(Error::InfeasibleSubproblem(
                    "variance pair: gap cannot close".into(),
                ));
            }
        }
        for _ in 0..DUAL_MAX_ITERS {
            if hi - lo <= 1e-14 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (a1, ak, g) = eval(mid, Some(&xk))?;
            if g >= 0.0 {
                hi = mid;
                x1 = a1;
                xk = ak;
                if g <= 1e-13 {
                    break;
                }
            } else {
                lo = mid;
            }
        }
    }
    let value = weighted_cost(family, &m1, w1, &x1) + weighted_cost(family, &mk, wk, &xk);
    Ok(PairSolution {
        lambda1: x1,
        lambdak: xk,
        value,
    })
}
