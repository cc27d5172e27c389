#![allow(dead_code)]

use fairbandit::counterset::{f_star, infeasible_shortcut_weights};
use fairbandit::oracle::grid_oracle_min;
use fairbandit::weights::{solve_oracle, OracleConfig};
use fairbandit::{CellMatrix, FairnessSpec, FamilySpec, Instance};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Hard,
    Penalized,
    Variance,
}

pub const KINDS: [Kind; 3] = [Kind::Hard, Kind::Penalized, Kind::Variance];

/// Weights drawn uniformly from the simplex.
pub fn random_simplex(rng: &mut impl Rng, k: usize, l: usize) -> CellMatrix {
    let raw: Vec<f64> = (0..k * l).map(|_| -rng.random::<f64>().ln()).collect();
    let s: f64 = raw.iter().sum();
    CellMatrix::from_row_major(k, l, raw.iter().map(|x| x / s).collect())
}

/// Small random instance (K <= 3, L <= 2); may fall outside the class.
pub fn random_instance(rng: &mut impl Rng, kind: Kind, bernoulli: bool) -> Instance {
    let k = rng.random_range(2..=3);
    let l = rng.random_range(1..=2);
    let family = if bernoulli {
        FamilySpec::bernoulli()
    } else {
        FamilySpec::gaussian(rng.random_range(0.5..1.5)).unwrap()
    };
    let (lo, hi) = if bernoulli { (0.05, 0.95) } else { (-1.0, 1.0) };
    let mu: Vec<f64> = (0..k * l).map(|_| rng.random_range(lo..hi)).collect();
    let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.3..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let q: Vec<f64> = raw.iter().map(|x| x / s).collect();
    let c = if bernoulli {
        rng.random_range(0.2..0.6)
    } else {
        rng.random_range(-0.5..0.3)
    };
    let fairness = match kind {
        Kind::Hard => FairnessSpec::HardThreshold { c_min: c },
        Kind::Penalized => FairnessSpec::Penalized {
            c_min: c,
            gamma: (0..l).map(|_| rng.random_range(0.0..3.0)).collect(),
        },
        Kind::Variance => FairnessSpec::VarianceBall {
            c_var: rng.random_range(0.01..0.2),
        },
    };
    Instance::new(CellMatrix::from_row_major(k, l, mu), q, family, fairness).unwrap()
}

/// Random instance inside the class with the given margin.
pub fn random_instance_in_s(
    rng: &mut impl Rng,
    kind: Kind,
    bernoulli: bool,
    margin: f64,
) -> Instance {
    loop {
        let inst = random_instance(rng, kind, bernoulli);
        if inst.validate_in_s(margin).is_in() {
            return inst;
        }
    }
}

/// Relative gap between `f_star` and the grid oracle at random weights.
pub fn oracle_gap(inst: &Instance, w: &CellMatrix) -> (f64, f64, f64) {
    let fast = f_star(inst, w).unwrap().value;
    let step = if inst.family().kind == fairbandit::FamilyKind::Bernoulli {
        0.05
    } else {
        0.2
    };
    let grid = grid_oracle_min(inst, w, step).unwrap();
    let rel = (fast - grid).abs() / grid.abs().max(1e-12);
    (fast, grid, rel)
}

/// Largest relative oracle gap over `n` random instances of one family and kind.
pub fn worst_oracle_gap(rng: &mut impl Rng, kind: Kind, bernoulli: bool, n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let inst = random_instance_in_s(rng, kind, bernoulli, 0.02);
        let w = random_simplex(rng, inst.num_policies(), inst.num_subpops());
        let (fast, grid, rel) = oracle_gap(&inst, &w);
        // values below this are compared absolutely
        let rel = if grid < 1e-9 {
            (fast - grid).abs()
        } else {
            rel
        };
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Worst violation of `f(w2) <= f(w) + c . (w2 - w)` over `n` random triples.
pub fn worst_subgradient_violation(rng: &mut impl Rng, n: usize) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..n {
        let inst = random_instance_in_s(rng, KINDS[i % 3], i % 2 == 1, 1e-3);
        let (k, l) = (inst.num_policies(), inst.num_subpops());
        let w = random_simplex(rng, k, l);
        let w2 = random_simplex(rng, k, l);
        let e = f_star(&inst, &w).unwrap();
        let f2 = f_star(&inst, &w2).unwrap().value;
        let bound = e.value + e.subgrad.dot(&w2) - e.subgrad.dot(&w);
        worst = worst.max(f2 - bound);
    }
    worst
}

/// Random all-infeasible threshold instance.
pub fn random_all_infeasible(rng: &mut impl Rng, bernoulli: bool) -> Instance {
    loop {
        let inst = random_instance(rng, Kind::Hard, bernoulli);
        if inst.best_policy().is_none() && inst.validate_in_s(1e-2).is_in() {
            return inst;
        }
    }
}

/// Relative gap between the closed-form weights and plain ascent on an all-infeasible instance.
pub fn shortcut_vs_ascent(inst: &Instance) -> f64 {
    let w = infeasible_shortcut_weights(inst).unwrap();
    let closed = f_star(inst, &w).unwrap().value;
    let ascent = solve_oracle(
        inst,
        &OracleConfig {
            infeasible_shortcut: false,
            ..OracleConfig::default()
        },
    )
    .unwrap()
    .f_star;
    (closed - ascent).abs() / closed
}
