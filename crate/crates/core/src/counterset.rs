//! Inner minimization over alternative instances.
//!
//! For weights `w` on the cells, `f*(w)` is the smallest weighted KL cost of
//! moving the means to an instance whose answer differs. It splits into
//! branches: make the incumbent infeasible (`Feas`), make a rival optimal
//! (`Opt`), or, when nothing is feasible, make some policy feasible
//! (`MakeFeasible`). The returned subgradient is the per-cell divergence at
//! the minimizing alternative, so `f*(w) = c . w`.

use serde::{Deserialize, Serialize};

use crate::cells::CellMatrix;
use crate::error::{Error, Result};
use crate::instance::{FairnessSpec, Instance};
use crate::solvers::{
    solve_coupled_pair, solve_linear_coupled, solve_variance_enter, solve_variance_exit,
    solve_variance_pair, CoupledCell,
};

/// Largest `L` accepted by the sign-pattern enumeration.
pub const MAX_PATTERN_SUBPOPS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// Push the incumbent out of the feasible set (through `subpop` when the
    /// rule is coordinate-wise).
    Feas(Option<usize>),
    /// Let policy `k` overtake the incumbent.
    Opt(usize),
    /// With nothing feasible, make policy `k` feasible.
    MakeFeasible(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CounterEval {
    pub value: f64,
    pub branch: Branch,
    /// Modified cells of the minimizing alternative, as `(k, l, lambda)`.
    pub lambda: Vec<(usize, usize, f64)>,
    pub subgrad: CellMatrix,
}

impl CounterEval {
    /// Full alternative means: `mu` with the modified cells substituted.
    pub fn alternative(&self, mu: &CellMatrix) -> CellMatrix {
        let mut out = mu.clone();
        for &(k, l, x) in &self.lambda {
            out.set(k, l, x);
        }
        out
    }
}

struct Candidate {
    value: f64,
    branch: Branch,
    cells: Vec<(usize, usize, f64)>,
}

fn check_weights(instance: &Instance, w: &CellMatrix) -> Result<()> {
    if w.rows() != instance.num_policies() || w.cols() != instance.num_subpops() {
        return Err(Error::invalid(format!(
            "weights are {}x{}, instance is {}x{}",
            w.rows(),
            w.cols(),
            instance.num_policies(),
            instance.num_subpops()
        )));
    }
    if w.as_slice().iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let s = w.sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("weights sum to {s}, not 1")));
    }
    Ok(())
}

fn row_cells(k: usize, lambda: &[f64]) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
    lambda.iter().enumerate().map(move |(l, &x)| (k, l, x))
}

/// Evaluate `f*(w)` with its minimizing branch and subgradient.
pub fn f_star(instance: &Instance, w: &CellMatrix) -> Result<CounterEval> {
    check_weights(instance, w)?;
    let candidates = match instance.fairness() {
        FairnessSpec::HardThreshold { c_min } => hard_candidates(instance, w, *c_min)?,
        FairnessSpec::VarianceBall { c_var } => variance_candidates(instance, w, *c_var)?,
        FairnessSpec::Penalized { .. } => {
            let best = instance
                .best_policy()
                .expect("penalized argmax always exists");
            let mut out = Vec::new();
            for k in (0..instance.num_policies()).filter(|&k| k != best) {
                if let Some(g) = gamma_opt_inner(instance, w, best, k)? {
                    let mut cells: Vec<_> = row_cells(best, &g.lambda1).collect();
                    cells.extend(row_cells(k, &g.lambdak));
                    out.push(Candidate {
                        value: g.value,
                        branch: Branch::Opt(k),
                        cells,
                    });
                }
            }
            out
        }
    };
    // candidates arrive in tie-break order: Feas, then Opt/MakeFeasible by k
    let mut best: Option<Candidate> = None;
    for c in candidates {
        if best.as_ref().is_none_or(|b| c.value < b.value) {
            best = Some(c);
        }
    }
    let Some(best) = best else {
        return Err(Error::InfeasibleSubproblem(
            "no alternative instance is reachable".into(),
        ));
    };
    let family = instance.family();
    let mut subgrad = CellMatrix::zeros(w.rows(), w.cols());
    for &(k, l, x) in &best.cells {
        subgrad.set(k, l, family.kl_unchecked(instance.mean(k, l), x));
    }
    let value = subgrad.dot(w);
    Ok(CounterEval {
        value,
        branch: best.branch,
        lambda: best.cells,
        subgrad,
    })
}

fn hard_candidates(instance: &Instance, w: &CellMatrix, c: f64) -> Result<Vec<Candidate>> {
    let family = instance.family();
    let kk = instance.num_policies();
    let ll = instance.num_subpops();
    let mut out = Vec::with_capacity(kk);
    match instance.best_policy() {
        None => {
            let (_, dhi) = family.domain();
            for k in 0..kk {
                if c > dhi {
                    break;
                }
                let mut value = 0.0;
                let mut cells = Vec::new();
                for l in 0..ll {
                    let m = instance.mean(k, l);
                    if m < c {
                        value += w.get(k, l) * family.kl_unchecked(m, c);
                        cells.push((k, l, c));
                    }
                }
                out.push(Candidate {
                    value,
                    branch: Branch::MakeFeasible(k),
                    cells,
                });
            }
        }
        Some(b) => {
            let (dlo, _) = family.domain();
            if c >= dlo {
                let mut feas: Option<(f64, usize)> = None;
                for l in 0..ll {
                    let v = w.get(b, l) * family.kl_unchecked(instance.mean(b, l), c);
                    if feas.is_none_or(|(fv, _)| v < fv) {
                        feas = Some((v, l));
                    }
                }
                let (value, l) = feas.expect("L >= 1");
                out.push(Candidate {
                    value,
                    branch: Branch::Feas(Some(l)),
                    cells: vec![(b, l, c)],
                });
            }
            let box_low = vec![c; ll];
            for k in (0..kk).filter(|&k| k != b) {
                match solve_coupled_pair(
                    family,
                    instance.means().row(b),
                    instance.means().row(k),
                    w.row(b),
                    w.row(k),
                    instance.q(),
                    &box_low,
                ) {
                    Ok(p) => {
                        let mut cells: Vec<_> = row_cells(b, &p.lambda1).collect();
                        cells.extend(row_cells(k, &p.lambdak));
                        out.push(Candidate {
                            value: p.value,
                            branch: Branch::Opt(k),
                            cells,
                        });
                    }
                    Err(Error::InfeasibleSubproblem(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(out)
}

fn variance_candidates(instance: &Instance, w: &CellMatrix, c_var: f64) -> Result<Vec<Candidate>> {
    let family = instance.family();
    let q = instance.q();
    let kk = instance.num_policies();
    let mut out = Vec::with_capacity(kk);
    match instance.best_policy() {
        None => {
            for k in 0..kk {
                let s = solve_variance_enter(family, instance.means().row(k), w.row(k), q, c_var)?;
                out.push(Candidate {
                    value: s.value,
                    branch: Branch::MakeFeasible(k),
                    cells: row_cells(k, &s.lambda).collect(),
                });
            }
        }
        Some(b) => {
            match solve_variance_exit(family, instance.means().row(b), w.row(b), q, c_var) {
                Ok(s) => out.push(Candidate {
                    value: s.value,
                    branch: Branch::Feas(None),
                    cells: row_cells(b, &s.lambda).collect(),
                }),
                Err(Error::InfeasibleSubproblem(_)) => {}
                Err(e) => return Err(e),
            }
            for k in (0..kk).filter(|&k| k != b) {
                match solve_variance_pair(
                    family,
                    instance.means().row(b),
                    instance.means().row(k),
                    w.row(b),
                    w.row(k),
                    q,
                    c_var,
                ) {
                    Ok(p) => {
                        let mut cells: Vec<_> = row_cells(b, &p.lambda1).collect();
                        cells.extend(row_cells(k, &p.lambdak));
                        out.push(Candidate {
                            value: p.value,
                            branch: Branch::Opt(k),
                            cells,
                        });
                    }
                    Err(Error::InfeasibleSubproblem(_)) => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaOpt {
    pub value: f64,
    pub lambda1: Vec<f64>,
    pub lambdak: Vec<f64>,
}

/// Cheapest move making `k` overtake the penalized leader. Each subpopulation
/// cell is either above the threshold (linear with weight `q_l`) or below it
/// (weight `q_l (1 + gamma_l)`), giving `2^(2L)` convex pieces.
pub fn gamma_opt(instance: &Instance, w: &CellMatrix, k: usize) -> Result<GammaOpt> {
    check_weights(instance, w)?;
    if !matches!(instance.fairness(), FairnessSpec::Penalized { .. }) {
        return Err(Error::UnsupportedFairness(instance.fairness().name()));
    }
    let kk = instance.num_policies();
    if k >= kk {
        return Err(Error::IndexOutOfRange { index: k, len: kk });
    }
    let best = instance
        .best_policy()
        .expect("penalized argmax always exists");
    if k == best {
        return Err(Error::Precondition(format!(
            "policy {k} is the penalized leader"
        )));
    }
    gamma_opt_inner(instance, w, best, k)?.ok_or_else(|| {
        Error::InfeasibleSubproblem(format!("no sign pattern lets policy {k} overtake"))
    })
}

fn gamma_opt_inner(
    instance: &Instance,
    w: &CellMatrix,
    best: usize,
    k: usize,
) -> Result<Option<GammaOpt>> {
    let FairnessSpec::Penalized { c_min, gamma } = instance.fairness() else {
        unreachable!("checked by callers")
    };
    let ll = instance.num_subpops();
    if ll > MAX_PATTERN_SUBPOPS {
        return Err(Error::PatternLimit(ll));
    }
    let family = instance.family();
    let q = instance.q();
    let c = *c_min;
    // (arm, l, sign) choices; cells with gamma_l = 0 need no split
    let arms = [best, k];
    let splits: Vec<(usize, usize)> = (0..2)
        .flat_map(|a| (0..ll).map(move |l| (a, l)))
        .filter(|&(_, l)| gamma[l] > 0.0)
        .collect();
    let n_patterns = 1usize << splits.len();
    let mut best_sol: Option<GammaOpt> = None;
    let mut cells = vec![
        CoupledCell {
            mu: 0.0,
            weight: 0.0,
            coef: 0.0,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        };
        2 * ll
    ];
    for pattern in 0..n_patterns {
        let mut rhs = 0.0;
        for a in 0..2 {
            let sign = if a == 0 { -1.0 } else { 1.0 };
            for l in 0..ll {
                cells[a * ll + l] = CoupledCell {
                    mu: instance.mean(arms[a], l),
                    weight: w.get(arms[a], l),
                    coef: sign * q[l],
                    lower: f64::NEG_INFINITY,
                    upper: f64::INFINITY,
                };
            }
        }
        for (bit, &(a, l)) in splits.iter().enumerate() {
            let cell = &mut cells[a * ll + l];
            let sign = if a == 0 { -1.0 } else { 1.0 };
            if pattern >> bit & 1 == 0 {
                cell.lower = c;
            } else {
                cell.upper = c;
                cell.coef = sign * q[l] * (1.0 + gamma[l]);
                // the constant -q_l gamma_l C moves to the right-hand side
                rhs += sign * q[l] * gamma[l] * c;
            }
        }
        // cost of merely entering the pattern's boxes bounds the piece from below
        let floor: f64 = cells
            .iter()
            .map(|cc| {
                let m = family.clip_mean(cc.mu);
                cc.weight * family.kl_unchecked(m, m.clamp(cc.lower, cc.upper))
            })
            .sum();
        if best_sol.as_ref().is_some_and(|b| floor >= b.value) {
            continue;
        }
        match solve_linear_coupled(family, &cells, rhs) {
            Ok(sol) => {
                if best_sol.as_ref().is_none_or(|b| sol.value < b.value) {
                    let (a, b) = sol.lambda.split_at(ll);
                    best_sol = Some(GammaOpt {
                        value: sol.value,
                        lambda1: a.to_vec(),
                        lambdak: b.to_vec(),
                    });
                }
            }
            Err(Error::InfeasibleSubproblem(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(best_sol)
}

/// Optimal weights when no policy is feasible: all of policy `k`'s mass on
/// its worst violation, with mass inversely proportional to that divergence.
pub fn infeasible_shortcut_weights(instance: &Instance) -> Result<CellMatrix> {
    let FairnessSpec::HardThreshold { c_min } = instance.fairness() else {
        return Err(Error::UnsupportedFairness(instance.fairness().name()));
    };
    if instance.best_policy().is_some() {
        return Err(Error::Precondition("some policy is feasible".into()));
    }
    let family = instance.family();
    let kk = instance.num_policies();
    let ll = instance.num_subpops();
    let mut picks = Vec::with_capacity(kk);
    for k in 0..kk {
        let mut worst: Option<(usize, f64)> = None;
        for l in 0..ll {
            let m = instance.mean(k, l);
            if m < *c_min {
                let d = family.kl_unchecked(m, *c_min);
                if worst.is_none_or(|(_, wd)| d > wd) {
                    worst = Some((l, d));
                }
            }
        }
        let (l, d) = worst.expect("infeasible policy has a violation");
        if !(d > 0.0) {
            return Err(Error::Precondition(format!(
                "policy {k} sits on the threshold"
            )));
        }
        picks.push((l, d));
    }
    let inv_sum: f64 = picks.iter().map(|(_, d)| 1.0 / d).sum();
    let mut w = CellMatrix::zeros(kk, ll);
    for (k, &(l, d)) in picks.iter().enumerate() {
        w.set(k, l, (1.0 / d) / inv_sum);
    }
    Ok(w)
}

/// GLR statistic `Z = t f*(counts / t)` at the estimated means.
pub fn glr_statistic(estimate: &Instance, counts: &CellMatrix) -> Result<f64> {
    let t = counts.sum();
    if !(t > 0.0) {
        return Err(Error::invalid("counts are all zero"));
    }
    let w = counts.map(|n| n / t);
    Ok(t * f_star(estimate, &w)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfamily::FamilySpec;
    use crate::fixtures;
    use crate::instance::best_policy_of;
    use crate::solvers::{project_simplex, solve_coupled_pair};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(inst: &Instance) -> CellMatrix {
        let n = inst.num_policies() * inst.num_subpops();
        CellMatrix::filled(inst.num_policies(), inst.num_subpops(), 1.0 / n as f64)
    }

    fn random_simplex(rng: &mut impl Rng, k: usize, l: usize) -> CellMatrix {
        let raw: Vec<f64> = (0..k * l).map(|_| -rng.random::<f64>().ln()).collect();
        let s: f64 = raw.iter().sum();
        CellMatrix::from_row_major(k, l, raw.iter().map(|x| x / s).collect())
    }

    #[test]
    fn example2_uniform_weights() {
        let inst = fixtures::example2(0.1);
        // Pushing A out costs (1/6)(1/2) and so does lifting C's second cell,
        // but B overtakes A for less: all four cells of the pair move 0.275.
        let e = f_star(&inst, &uniform(&inst)).unwrap();
        assert_abs_diff_eq!(e.value, 4.0 * 0.275f64.powi(2) / 12.0, epsilon = 1e-12);
        assert_eq!(e.branch, Branch::Opt(1));
        assert_abs_diff_eq!(e.subgrad.dot(&uniform(&inst)), e.value, epsilon = 1e-15);
        // with B clearly infeasible, the Feas and Opt(C) branches tie at 1/12
        let far = fixtures::example2(0.1).with_means(CellMatrix::from_rows(&[
            vec![1.0, 1.0],
            vec![1.0, -3.0],
            vec![4.0, -1.0],
        ]));
        let e = f_star(&far.unwrap(), &uniform(&inst)).unwrap();
        assert_abs_diff_eq!(e.value, 1.0 / 12.0, epsilon = 1e-12);
        assert!(matches!(e.branch, Branch::Feas(Some(_))));
    }

    #[test]
    fn all_infeasible_clamp_costs() {
        let inst = fixtures::all_infeasible_2x2();
        // all mass on policy 0's violated cell: policy 1 becomes feasible for free
        let mut w = CellMatrix::zeros(2, 2);
        w.set(0, 0, 1.0);
        let e = f_star(&inst, &w).unwrap();
        assert_abs_diff_eq!(e.value, 0.0, epsilon = 1e-15);
        assert_eq!(e.branch, Branch::MakeFeasible(1));
        // half on each violated cell: min(0.5 d(-1,0), 0.5 d(-2,0)) = 0.25
        let mut w2 = CellMatrix::zeros(2, 2);
        w2.set(0, 0, 0.5);
        w2.set(1, 1, 0.5);
        let e2 = f_star(&inst, &w2).unwrap();
        assert_abs_diff_eq!(e2.value, 0.25, epsilon = 1e-15);
        assert_eq!(e2.branch, Branch::MakeFeasible(0));
        assert_eq!(e2.lambda, vec![(0, 0, 0.0)]);
    }

    #[test]
    fn shortcut_weights_closed_form() {
        let inst = fixtures::all_infeasible_2x2();
        let w = infeasible_shortcut_weights(&inst).unwrap();
        assert_abs_diff_eq!(w.get(0, 0), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(w.get(1, 1), 0.2, epsilon = 1e-15);
        assert_eq!(w.get(0, 1), 0.0);
        assert_eq!(w.get(1, 0), 0.0);
        assert_abs_diff_eq!(f_star(&inst, &w).unwrap().value, 0.4, epsilon = 1e-12);

        let sym = Instance::new(
            CellMatrix::from_rows(&[vec![-1.0, 0.5], vec![0.5, -1.0]]),
            vec![0.5, 0.5],
            FamilySpec::gaussian(1.0).unwrap(),
            FairnessSpec::HardThreshold { c_min: 0.0 },
        )
        .unwrap();
        let w = infeasible_shortcut_weights(&sym).unwrap();
        assert_abs_diff_eq!(w.get(0, 0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(w.get(1, 1), 0.5, epsilon = 1e-15);
        assert!(matches!(
            infeasible_shortcut_weights(&fixtures::example2(0.5)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn shortcut_weights_beat_random_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let mu: Vec<f64> = (0..6)
                .map(|i| {
                    if i % 2 == 0 {
                        rng.random_range(-2.0..-0.1)
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect();
            let inst = Instance::new(
                CellMatrix::from_row_major(3, 2, mu),
                vec![0.5, 0.5],
                FamilySpec::gaussian(1.0).unwrap(),
                FairnessSpec::HardThreshold { c_min: 0.0 },
            )
            .unwrap();
            let star = f_star(&inst, &infeasible_shortcut_weights(&inst).unwrap())
                .unwrap()
                .value;
            for _ in 0..1000 {
                let w = random_simplex(&mut rng, 3, 2);
                assert!(star >= f_star(&inst, &w).unwrap().value - 1e-6);
            }
        }
    }

    #[test]
    fn glr_examples() {
        let inst = fixtures::example2(0.1);
        let counts = CellMatrix::filled(3, 2, 10.0);
        let z = 60.0 * 4.0 * 0.275f64.powi(2) / 12.0;
        assert_abs_diff_eq!(glr_statistic(&inst, &counts).unwrap(), z, epsilon = 1e-12);
        let doubled = counts.map(|n| 2.0 * n);
        assert_abs_diff_eq!(
            glr_statistic(&inst, &doubled).unwrap(),
            2.0 * z,
            epsilon = 1e-12
        );
        let mut zero_cell = counts.clone();
        zero_cell.set(0, 0, 0.0);
        assert_abs_diff_eq!(
            glr_statistic(&inst, &zero_cell).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert!(glr_statistic(&inst, &CellMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn rejects_off_simplex_weights() {
        let inst = fixtures::example2(0.1);
        assert!(f_star(&inst, &CellMatrix::filled(3, 2, 0.5)).is_err());
        assert!(f_star(&inst, &CellMatrix::filled(2, 3, 1.0 / 6.0)).is_err());
    }

    #[test]
    fn gamma_zero_is_unboxed_coupled_pair() {
        let base = fixtures::extension_hard();
        let inst = base
            .with_fairness(FairnessSpec::Penalized {
                c_min: 0.2,
                gamma: vec![0.0; 3],
            })
            .unwrap();
        let w = uniform(&inst);
        let b = inst.best_policy().unwrap();
        for k in (0..10).filter(|&k| k != b) {
            let g = gamma_opt(&inst, &w, k).unwrap();
            let p = solve_coupled_pair(
                inst.family(),
                inst.means().row(b),
                inst.means().row(k),
                w.row(b),
                w.row(k),
                inst.q(),
                &[f64::NEG_INFINITY; 3],
            )
            .unwrap();
            assert_abs_diff_eq!(g.value, p.value, epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma_all_above_threshold_matches_free_coupled() {
        let inst = Instance::new(
            CellMatrix::from_rows(&[vec![1.0, 1.2], vec![0.9, 0.8]]),
            vec![0.5, 0.5],
            FamilySpec::gaussian(0.5).unwrap(),
            FairnessSpec::Penalized {
                c_min: 0.0,
                gamma: vec![2.0, 2.0],
            },
        )
        .unwrap();
        let w = uniform(&inst);
        let g = gamma_opt(&inst, &w, 1).unwrap();
        let p = solve_coupled_pair(
            inst.family(),
            &[1.0, 1.2],
            &[0.9, 0.8],
            &[0.25; 2],
            &[0.25; 2],
            &[0.5, 0.5],
            &[f64::NEG_INFINITY; 2],
        )
        .unwrap();
        assert_abs_diff_eq!(g.value, p.value, epsilon = 1e-12);
    }

    #[test]
    fn gamma_guards() {
        let inst = fixtures::extension_penalized(0.5);
        let w = uniform(&inst);
        assert!(matches!(
            gamma_opt(&inst, &w, 3),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            gamma_opt(&fixtures::extension_hard(), &w, 0),
            Err(Error::UnsupportedFairness(_))
        ));
        let wide = Instance::new(
            CellMatrix::from_rows(&[vec![1.0; 13], vec![0.0; 13]]),
            vec![1.0 / 13.0; 13],
            FamilySpec::gaussian(1.0).unwrap(),
            FairnessSpec::Penalized {
                c_min: 0.5,
                gamma: vec![1.0; 13],
            },
        )
        .unwrap();
        let ww = CellMatrix::filled(2, 13, 1.0 / 26.0);
        assert!(matches!(
            gamma_opt(&wide, &ww, 1),
            Err(Error::PatternLimit(13))
        ));
    }

    fn random_instance(rng: &mut impl Rng, fairness: &str, bernoulli: bool) -> Instance {
        let k = rng.random_range(2..4);
        let l = rng.random_range(1..3);
        let fam = if bernoulli {
            FamilySpec::bernoulli()
        } else {
            FamilySpec::gaussian(rng.random_range(0.5..1.5)).unwrap()
        };
        let (lo, hi) = if bernoulli { (0.05, 0.95) } else { (-1.0, 1.0) };
        let mu: Vec<f64> = (0..k * l).map(|_| rng.random_range(lo..hi)).collect();
        let q = project_simplex(
            &(0..l)
                .map(|_| rng.random_range(0.3..1.0))
                .collect::<Vec<_>>(),
        );
        let q: Vec<f64> = q.iter().map(|x| x.max(0.2)).collect();
        let c = if bernoulli {
            rng.random_range(0.2..0.6)
        } else {
            rng.random_range(-0.5..0.3)
        };
        let fairness = match fairness {
            "hard" => FairnessSpec::HardThreshold { c_min: c },
            "penalized" => FairnessSpec::Penalized {
                c_min: c,
                gamma: (0..l).map(|_| rng.random_range(0.0..3.0)).collect(),
            },
            _ => FairnessSpec::VarianceBall {
                c_var: rng.random_range(0.01..0.2),
            },
        };
        Instance::new(CellMatrix::from_row_major(k, l, mu), q, fam, fairness).unwrap()
    }

    #[test]
    fn subgradient_inequality_and_concavity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 1000 {
            let kind = ["hard", "penalized", "variance"][checked % 3];
            let inst = random_instance(&mut rng, kind, checked % 2 == 0);
            if !inst.validate_in_s(1e-3).is_in() {
                continue;
            }
            let (k, l) = (inst.num_policies(), inst.num_subpops());
            let w = random_simplex(&mut rng, k, l);
            let w2 = random_simplex(&mut rng, k, l);
            let e = f_star(&inst, &w).unwrap();
            let e2 = f_star(&inst, &w2).unwrap();
            let lin = e.value + e.subgrad.dot(&w2) - e.subgrad.dot(&w);
            assert!(e2.value <= lin + 1e-9, "{kind}: {} > {lin}", e2.value);
            let t: f64 = rng.random();
            let mix = CellMatrix::from_row_major(
                k,
                l,
                w.as_slice()
                    .iter()
                    .zip(w2.as_slice())
                    .map(|(a, b)| t * a + (1.0 - t) * b)
                    .collect(),
            );
            let em = f_star(&inst, &mix).unwrap();
            assert!(em.value >= t * e.value + (1.0 - t) * e2.value - 1e-9);
            checked += 1;
        }
    }

    #[test]
    fn subgradient_is_supported_on_branch_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for i in 0..200 {
            let kind = ["hard", "penalized", "variance"][i % 3];
            let inst = random_instance(&mut rng, kind, i % 2 == 1);
            let w = random_simplex(&mut rng, inst.num_policies(), inst.num_subpops());
            let e = f_star(&inst, &w).unwrap();
            assert_abs_diff_eq!(e.value, e.subgrad.dot(&w), epsilon = 1e-12);
            for k in 0..inst.num_policies() {
                for l in 0..inst.num_subpops() {
                    if !e.lambda.iter().any(|&(a, b, _)| a == k && b == l) {
                        assert_eq!(e.subgrad.get(k, l), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn alternative_changes_the_answer() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut checked = 0;
        while checked < 300 {
            let kind = ["hard", "penalized", "variance"][checked % 3];
            let inst = random_instance(&mut rng, kind, checked % 2 == 0);
            if !inst.validate_in_s(1e-3).is_in() {
                continue;
            }
            let w = random_simplex(&mut rng, inst.num_policies(), inst.num_subpops());
            let e = f_star(&inst, &w).unwrap();
            let alt = e.alternative(inst.means());
            let orig = inst.best_policy();
            // relax the closures by 1e-9 in the alternative's favour
            let relaxed = match inst.fairness() {
                FairnessSpec::HardThreshold { c_min } => FairnessSpec::HardThreshold {
                    c_min: c_min - 1e-9,
                },
                FairnessSpec::VarianceBall { c_var } => FairnessSpec::VarianceBall {
                    c_var: c_var + 1e-9,
                },
                other => other.clone(),
            };
            let answer_alt = |fair: &FairnessSpec, tweak: f64| {
                let mut m = alt.clone();
                if let Branch::Opt(k) = e.branch {
                    for l in 0..m.cols() {
                        m.set(k, l, m.get(k, l) + tweak);
                    }
                }
                best_policy_of(&m, inst.q(), fair)
            };
            let differs = match e.branch {
                Branch::Feas(_) => {
                    let strict = match inst.fairness() {
                        FairnessSpec::HardThreshold { c_min } => FairnessSpec::HardThreshold {
                            c_min: c_min + 1e-9,
                        },
                        FairnessSpec::VarianceBall { c_var } => FairnessSpec::VarianceBall {
                            c_var: c_var - 1e-9,
                        },
                        other => other.clone(),
                    };
                    answer_alt(&strict, 0.0) != orig
                }
                _ => answer_alt(&relaxed, 1e-9) != orig,
            };
            assert!(differs, "{kind} {:?} {:?}", e.branch, inst);
            checked += 1;
        }
    }

    #[test]
    fn large_gamma_approaches_hard_threshold() {
        let hard = fixtures::extension_hard();
        let pen = fixtures::extension_penalized(1e4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut matched = 0;
        for _ in 0..200 {
            if matched == 20 {
                break;
            }
            let w = random_simplex(&mut rng, 10, 3);
            let eh = f_star(&hard, &w).unwrap();
            let ep = f_star(&pen, &w).unwrap();
            if let (Branch::Opt(a), Branch::Opt(b)) = (eh.branch, ep.branch) {
                if a == b {
                    assert!(
                        (eh.value - ep.value).abs() <= 1e-2,
                        "{} vs {}",
                        eh.value,
                        ep.value
                    );
                    matched += 1;
                }
            }
        }
        assert_eq!(matched, 20);
    }
}
