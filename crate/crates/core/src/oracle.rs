//! Brute-force grid oracles for tests. Exponential in the number of cells.

use crate::cells::CellMatrix;
use crate::counterset::Branch;
use crate::error::{Error, Result};
use crate::instance::{dispersion, penalized_value, weighted_mean, FairnessSpec, Instance};

/// Refuse grids larger than this many points per pass.
pub const MAX_GRID_POINTS: u128 = 100_000_000;

const ZOOM_ROUNDS: usize = 6;

/// Points per axis on the first pass over a wide box.
const AXIS_POINTS: usize = 40;

/// Distinct starting points refined by zooming.
const STARTS: usize = 6;

/// Candidates kept from the first grid when choosing the starts.
const START_POOL: usize = 256;

/// Minimize the weighted KL cost of `branch` over a regular grid of the
/// cells it may move, then zoom in around the best point a few times.
pub fn grid_oracle_f(
    instance: &Instance,
    w: &CellMatrix,
    branch: Branch,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::invalid("grid step must be positive"));
    }
    let ll = instance.num_subpops();
    let best = instance.best_policy();
    let rows: Vec<usize> = match branch {
        Branch::Feas(_) => vec![best.ok_or_else(|| Error::Precondition("no incumbent".into()))?],
        Branch::Opt(k) => vec![
            best.ok_or_else(|| Error::Precondition("no incumbent".into()))?,
            k,
        ],
        Branch::MakeFeasible(k) => vec![k],
    };
    let cells: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&k| (0..ll).map(move |l| (k, l)))
        .collect();
    let family = instance.family();
    let (dlo, dhi) = family.domain();
    let fairness = instance.fairness();
    let (c, pad) = match fairness {
        FairnessSpec::HardThreshold { c_min } | FairnessSpec::Penalized { c_min, .. } => {
            (Some(*c_min), 0.0)
        }
        FairnessSpec::VarianceBall { c_var } => (None, 2.0 * c_var.sqrt()),
    };
    let involved: Vec<f64> = cells
        .iter()
        .map(|&(k, l)| instance.mean(k, l))
        .chain(c)
        .collect();
    let gmin = involved.iter().cloned().fold(f64::INFINITY, f64::min);
    let gmax = involved.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let clamp_lo = |x: f64| x.max(dlo + 1e-9);
    let clamp_hi = |x: f64| x.min(dhi - 1e-9);

    let feasible = |lam: &[f64]| -> bool {
        match (fairness, branch) {
            (FairnessSpec::HardThreshold { c_min }, Branch::Feas(Some(l))) => {
                // only that one cell is meaningful; other cells must sit at their mean
                lam[l] <= *c_min
            }
            (FairnessSpec::HardThreshold { c_min }, Branch::Feas(None)) => {
                lam.iter().any(|x| x <= c_min)
            }
            (FairnessSpec::HardThreshold { c_min }, Branch::Opt(_)) => {
                lam[ll..].iter().all(|x| x >= c_min)
                    && weighted_mean(instance.q(), &lam[ll..])
                        >= weighted_mean(instance.q(), &lam[..ll])
            }
            (FairnessSpec::HardThreshold { c_min }, Branch::MakeFeasible(_)) => {
                lam.iter().all(|x| x >= c_min)
            }
            (FairnessSpec::VarianceBall { c_var }, Branch::Feas(_)) => {
                dispersion(instance.q(), lam) >= *c_var
            }
            (FairnessSpec::VarianceBall { c_var }, Branch::Opt(_)) => {
                dispersion(instance.q(), &lam[ll..]) <= *c_var
                    && weighted_mean(instance.q(), &lam[ll..])
                        >= weighted_mean(instance.q(), &lam[..ll])
            }
            (FairnessSpec::VarianceBall { c_var }, Branch::MakeFeasible(_)) => {
                dispersion(instance.q(), lam) <= *c_var
            }
            (FairnessSpec::Penalized { c_min, gamma }, Branch::Opt(_)) => {
                penalized_value(instance.q(), gamma, *c_min, &lam[ll..])
                    >= penalized_value(instance.q(), gamma, *c_min, &lam[..ll])
            }
            (FairnessSpec::Penalized { .. }, _) => false,
        }
    };
    // a Feas(Some(l)) branch moves a single cell
    let free: Vec<bool> = match branch {
        Branch::Feas(Some(l)) if matches!(fairness, FairnessSpec::HardThreshold { .. }) => {
            (0..ll).map(|i| i == l).collect()
        }
        _ => vec![true; cells.len()],
    };
    let cost = |lam: &[f64]| -> f64 {
        cells
            .iter()
            .zip(lam)
            .map(|(&(k, l), &x)| w.get(k, l) * family.kl_unchecked(instance.mean(k, l), x))
            .sum()
    };
    let search = |lo: Vec<f64>, hi: Vec<f64>, step: f64| -> Result<Option<(f64, Vec<f64>)>> {
        zoom_search(&cells, &free, instance, lo, hi, step, &feasible, &cost)
    };

    // first pass: a box around the involved values
    let lo: Vec<f64> = cells.iter().map(|_| clamp_lo(gmin - pad - step)).collect();
    let hi: Vec<f64> = cells.iter().map(|_| clamp_hi(gmax + pad + step)).collect();
    let Some((upper, _)) = search(lo, hi, step)? else {
        return Err(Error::InfeasibleSubproblem(
            "no grid point satisfies the branch".into(),
        ));
    };
    // second pass: every point costing at most `upper` lies in these boxes
    let (lo, hi): (Vec<f64>, Vec<f64>) = cells
        .iter()
        .map(|&(k, l)| {
            let m = instance.mean(k, l);
            let budget = upper / w.get(k, l).max(1e-300);
            let within = |x: f64| family.kl_unchecked(m, x) <= budget;
            (
                kl_ball_edge(m, clamp_lo(dlo.max(m - 1e6)), &within),
                kl_ball_edge(m, clamp_hi(dhi.min(m + 1e6)), &within),
            )
        })
        .unzip();
    // the boxes are tight, so their width alone sets the resolution
    let best = search(lo, hi, 0.0)?.map(|(v, _)| v).unwrap_or(upper);
    Ok(best.min(upper))
}

/// Edge of `{x : within(x)}` between `m` (inside) and `far`, rounded outward.
fn kl_ball_edge(m: f64, far: f64, within: &dyn Fn(f64) -> bool) -> f64 {
    if within(far) {
        return far;
    }
    let (mut a, mut b) = (m, far);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if within(mid) {
            a = mid;
        } else {
            b = mid;
        }
    }
    b
}

/// Regular grid over `[lo, hi]` (at most `AXIS_POINTS` per axis, never finer
/// than `step`), then repeated zooms around the best few grid points that are
/// not neighbors of one another.
#[allow(clippy::too_many_arguments)]
fn zoom_search(
    cells: &[(usize, usize)],
    free: &[bool],
    instance: &Instance,
    lo: Vec<f64>,
    hi: Vec<f64>,
    step: f64,
    feasible: &dyn Fn(&[f64]) -> bool,
    cost: &dyn Fn(&[f64]) -> f64,
) -> Result<Option<(f64, Vec<f64>)>> {
    let (dlo, dhi) = instance.family().domain();
    let h0: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(a, b)| step.max((b - a) / AXIS_POINTS as f64))
        .collect();
    let axes = |lo: &[f64], hi: &[f64], h: &[f64]| -> Vec<Vec<f64>> {
        (0..cells.len())
            .map(|i| {
                if !free[i] {
                    let (k, l) = cells[i];
                    return vec![instance.mean(k, l)];
                }
                let n = ((hi[i] - lo[i]) / h[i]).ceil().max(0.0) as usize;
                (0..=n)
                    .map(|j| (lo[i] + j as f64 * h[i]).min(hi[i]))
                    .collect()
            })
            .collect()
    };
    let pool = scan(&axes(&lo, &hi, &h0), feasible, cost, START_POOL)?;
    let mut starts: Vec<&(f64, Vec<f64>)> = Vec::new();
    for cand in &pool {
        let near = |s: &&(f64, Vec<f64>)| {
            (0..cells.len()).all(|i| (s.1[i] - cand.1[i]).abs() <= 1.01 * h0[i])
        };
        if !starts.iter().any(near) {
            starts.push(cand);
        }
        if starts.len() == STARTS {
            break;
        }
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in starts {
        let mut inc = start.clone();
        let mut h = h0.clone();
        for _ in 0..ZOOM_ROUNDS {
            // a window of 1.5 old steps around the incumbent, four times finer
            let lo: Vec<f64> = (0..cells.len())
                .map(|i| (inc.1[i] - 1.5 * h[i]).max(dlo + 1e-12))
                .collect();
            let hi: Vec<f64> = (0..cells.len())
                .map(|i| (inc.1[i] + 1.5 * h[i]).min(dhi - 1e-12))
                .collect();
            h.iter_mut().for_each(|x| *x /= 4.0);
            if let Some(p) = scan(&axes(&lo, &hi, &h), feasible, cost, 1)?
                .into_iter()
                .next()
            {
                if p.0 < inc.0 {
                    inc = p;
                }
            }
        }
        if best.as_ref().is_none_or(|(b, _)| inc.0 < *b) {
            best = Some(inc);
        }
    }
    Ok(best)
}

/// The `keep` cheapest feasible points of the product grid, cheapest first.
fn scan(
    axes: &[Vec<f64>],
    feasible: &dyn Fn(&[f64]) -> bool,
    cost: &dyn Fn(&[f64]) -> f64,
    keep: usize,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let total: u128 = axes.iter().map(|a| a.len() as u128).product();
    if total > MAX_GRID_POINTS {
        return Err(Error::GridTooLarge(total));
    }
    let mut top: Vec<(f64, Vec<f64>)> = Vec::with_capacity(keep + 1);
    let mut idx = vec![0usize; axes.len()];
    let mut pt: Vec<f64> = axes.iter().map(|a| a[0]).collect();
    loop {
        if feasible(&pt) {
            let v = cost(&pt);
            if top.len() < keep || v < top[top.len() - 1].0 {
                let at = top.partition_point(|(b, _)| *b <= v);
                top.insert(at, (v, pt.clone()));
                top.truncate(keep);
            }
        }
        let mut d = 0;
        while d < axes.len() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                pt[d] = axes[d][idx[d]];
                break;
            }
            idx[d] = 0;
            pt[d] = axes[d][0];
            d += 1;
        }
        if d == axes.len() {
            break;
        }
    }
    Ok(top)
}

/// Minimum of the grid oracle over every branch that applies to `instance`.
pub fn grid_oracle_min(instance: &Instance, w: &CellMatrix, step: f64) -> Result<f64> {
    let kk = instance.num_policies();
    let ll = instance.num_subpops();
    let mut branches = Vec::new();
    match (instance.fairness(), instance.best_policy()) {
        (FairnessSpec::Penalized { .. }, Some(b)) => {
            branches.extend((0..kk).filter(|&k| k != b).map(Branch::Opt))
        }
        (_, None) => branches.extend((0..kk).map(Branch::MakeFeasible)),
        (FairnessSpec::HardThreshold { .. }, Some(b)) => {
            branches.extend((0..ll).map(|l| Branch::Feas(Some(l))));
            branches.extend((0..kk).filter(|&k| k != b).map(Branch::Opt));
        }
        (FairnessSpec::VarianceBall { .. }, Some(b)) => {
            branches.push(Branch::Feas(None));
            branches.extend((0..kk).filter(|&k| k != b).map(Branch::Opt));
        }
    }
    let mut best = f64::INFINITY;
    for br in branches {
        match grid_oracle_f(instance, w, br, step) {
            Ok(v) => best = best.min(v),
            Err(Error::InfeasibleSubproblem(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}
