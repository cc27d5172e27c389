use fairbandit::engine::{
    run_tas_baseline, run_tascs, run_uniform_baseline, stopping_threshold, EngineConfig,
};
use fairbandit::env::Environment;
use fairbandit::{fixtures, CellMatrix, FairnessSpec, FamilySpec, Instance};

fn config(delta: f64, stream: u64) -> EngineConfig {
    EngineConfig {
        delta,
        seed: 42,
        stream,
        ..EngineConfig::default()
    }
}

#[test]
fn error_rate_stays_below_delta_on_small_instances() {
    for inst in [fixtures::example2(0.5), fixtures::asymptotic_scaling()] {
        let env = Environment::parametric(&inst);
        let delta = 0.1;
        let runs = 60;
        let errors = (0..runs)
            .filter(|&s| {
                let r = run_tascs(&inst, &env, &config(delta, s)).unwrap();
                assert!(r.stopped && !r.timed_out);
                r.correct != Some(true)
            })
            .count();
        assert!(
            (errors as f64) / (runs as f64) <= delta,
            "{errors} errors in {runs} runs"
        );
    }
}

#[test]
fn all_infeasible_bernoulli_recommends_nothing() {
    let inst = Instance::new(
        CellMatrix::from_rows(&[vec![0.2, 0.8], vec![0.8, 0.1]]),
        vec![0.5, 0.5],
        FamilySpec::bernoulli(),
        FairnessSpec::HardThreshold { c_min: 0.5 },
    )
    .unwrap();
    let env = Environment::parametric(&inst);
    for s in 0..10 {
        let r = run_tascs(&inst, &env, &config(0.1, s)).unwrap();
        assert!(r.stopped);
        assert_eq!(r.recommendation, None);
        assert_eq!(r.label(), 0);
    }
}

#[test]
fn same_stream_reproduces_and_streams_differ() {
    let inst = fixtures::asymptotic_scaling();
    let env = Environment::parametric(&inst);
    let a = run_tascs(&inst, &env, &config(0.2, 3)).unwrap();
    let b = run_tascs(&inst, &env, &config(0.2, 3)).unwrap();
    let c = run_tascs(&inst, &env, &config(0.2, 4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.final_counts, c.final_counts);
}

#[test]
fn batch_mode_stops_only_at_batch_boundaries() {
    let inst = fixtures::asymptotic_scaling();
    let env = Environment::parametric(&inst);
    let forced = 5 * (inst.num_policies() * inst.num_subpops()) as u64;
    for batch in [4, 10] {
        for s in 0..10 {
            let cfg = EngineConfig {
                batch,
                ..config(0.2, s)
            };
            let r = run_tascs(&inst, &env, &cfg).unwrap();
            assert!(r.stopped);
            assert_eq!(
                (r.tau - forced) % batch as u64,
                0,
                "tau {} batch {batch}",
                r.tau
            );
        }
    }
}

#[test]
fn fixed_budget_runs_use_the_whole_budget() {
    let inst = fixtures::misspec(20).unwrap();
    let env = Environment::parametric(&inst);
    let cfg = EngineConfig {
        budget: Some(1200),
        checkpoints: vec![600, 1200],
        model_family: Some(FamilySpec::gaussian(1.0).unwrap()),
        batch: 10,
        ascent_steps: 3,
        ..config(0.1, 0)
    };
    for run in [
        run_tascs(&inst, &env, &cfg).unwrap(),
        run_tas_baseline(&inst, &env, &cfg).unwrap(),
        run_uniform_baseline(&inst, &env, &cfg).unwrap(),
    ] {
        assert_eq!(run.tau, 1200);
        assert!(!run.stopped);
        assert_eq!(run.final_counts.as_slice().iter().sum::<f64>(), 1200.0);
        let ts: Vec<u64> = run.checkpoints.iter().map(|c| c.t).collect();
        assert_eq!(ts, vec![600, 1200]);
    }
}

#[test]
fn uniform_baseline_balances_counts() {
    let inst = fixtures::asymptotic_scaling();
    let env = Environment::parametric(&inst);
    let cfg = EngineConfig {
        budget: Some(1000),
        ..config(0.1, 1)
    };
    let r = run_uniform_baseline(&inst, &env, &cfg).unwrap();
    let c = r.final_counts.as_slice();
    let (lo, hi) = c
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(hi - lo <= 1.0);
}

#[test]
fn trajectory_csv_has_one_row_per_sample() {
    let inst = fixtures::example2(0.5);
    let env = Environment::parametric(&inst);
    let cfg = EngineConfig {
        record_trajectory: true,
        ..config(0.2, 0)
    };
    let r = run_tascs(&inst, &env, &cfg).unwrap();
    let mut buf = Vec::new();
    r.write_trajectory_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,k,l,outcome,Z,threshold"));
    assert_eq!(lines.count() as u64, r.tau);
    let traj = r.trajectory.as_ref().unwrap();
    assert!(traj.windows(2).all(|p| p[1].t == p[0].t + 1));
    assert!(r.final_z.unwrap() > stopping_threshold(r.tau, 0.2));
}
