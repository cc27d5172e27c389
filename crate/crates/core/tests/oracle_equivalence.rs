mod common;

use common::*;
use fairbandit::counterset::f_star;
use fairbandit::fixtures;
use fairbandit::CellMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gaussian_threshold_matches_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let worst = worst_oracle_gap(&mut rng, Kind::Hard, false, 40);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn bernoulli_penalized_matches_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let worst = worst_oracle_gap(&mut rng, Kind::Penalized, true, 40);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn all_infeasible_closed_form_is_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for i in 0..10 {
        let inst = random_all_infeasible(&mut rng, i % 2 == 0);
        let gap = shortcut_vs_ascent(&inst);
        assert!(gap < 1e-2, "{gap}");
    }
}

#[test]
fn bundled_instances_f_star_matches_grid_at_uniform_weights() {
    for inst in [
        fixtures::example2(0.1),
        fixtures::example2(0.5),
        fixtures::all_infeasible_2x2(),
    ] {
        let w = CellMatrix::filled(
            inst.num_policies(),
            inst.num_subpops(),
            1.0 / (inst.num_policies() * inst.num_subpops()) as f64,
        );
        let (fast, grid, rel) = oracle_gap(&inst, &w);
        assert!(rel < 1e-3 || (fast - grid).abs() < 1e-9, "{fast} vs {grid}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f_star_is_positively_homogeneous(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance_in_s(&mut rng, KINDS[(seed % 3) as usize], seed % 2 == 0, 1e-3);
        let w = random_simplex(&mut rng, inst.num_policies(), inst.num_subpops());
        let a = f_star(&inst, &w).unwrap().value;
        // f* is a minimum of linear functions of w, so the identity c.w holds at any scale
        let e = f_star(&inst, &w).unwrap();
        prop_assert!((e.subgrad.dot(&w) - a).abs() <= 1e-9 * a.max(1.0));
        let scaled = fairbandit::counterset::glr_statistic(&inst, &w.map(|x| x * scale)).unwrap();
        prop_assert!((scaled - scale * a).abs() <= 1e-7 * (scale * a).max(1.0));
    }

    #[test]
    fn grid_never_beats_f_star(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance_in_s(&mut rng, KINDS[(seed % 3) as usize], seed % 2 == 1, 0.02);
        let w = random_simplex(&mut rng, inst.num_policies(), inst.num_subpops());
        let (fast, grid, _) = oracle_gap(&inst, &w);
        prop_assert!(grid >= fast - 1e-9 * fast.max(1.0), "grid {} below f* {}", grid, fast);
    }
}
