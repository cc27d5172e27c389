//! Bundled instances and experiment manifests.

use crate::cells::CellMatrix;
use crate::env::CellMeanFixture;
use crate::expfamily::FamilySpec;
use crate::instance::{FairnessSpec, Instance};

const ASYMPTOTIC: &str = include_str!("../fixtures/instances/asymptotic_5x3.json");
const EXTENSION: &str = include_str!("../fixtures/instances/extension_10x3.json");
const IST_CELLS: &str = include_str!("../fixtures/instances/ist_cells.json");
const MISSPEC_20: &str = include_str!("../fixtures/instances/misspec_k20.json");
const MISSPEC_50: &str = include_str!("../fixtures/instances/misspec_k50.json");
const MISSPEC_100: &str = include_str!("../fixtures/instances/misspec_k100.json");

/// Threshold used by the IST case study.
pub const IST_C_MIN: f64 = 5.0 / 6.0;

/// Bundled manifests by file stem.
pub const MANIFESTS: &[(&str, &str)] = &[
    (
        "delta_sweep",
        include_str!("../fixtures/manifests/delta_sweep.json"),
    ),
    (
        "sensitivity",
        include_str!("../fixtures/manifests/sensitivity.json"),
    ),
    (
        "gamma_sweep",
        include_str!("../fixtures/manifests/gamma_sweep.json"),
    ),
    (
        "misspec_pcs",
        include_str!("../fixtures/manifests/misspec_pcs.json"),
    ),
    (
        "misspec_pcs_k50",
        include_str!("../fixtures/manifests/misspec_pcs_k50.json"),
    ),
    (
        "misspec_pcs_k100",
        include_str!("../fixtures/manifests/misspec_pcs_k100.json"),
    ),
    (
        "ist_pcs",
        include_str!("../fixtures/manifests/ist_pcs.json"),
    ),
];

pub fn manifest(name: &str) -> Option<&'static str> {
    MANIFESTS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

fn parse(text: &str) -> Instance {
    Instance::from_json_str(text).expect("bundled fixture parses")
}

/// Three treatments, two subpopulations; treatment B misses the threshold by `eps`.
pub fn example2(eps: f64) -> Instance {
    Instance::new(
        CellMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -eps], vec![4.0, -1.0]]),
        vec![0.5, 0.5],
        FamilySpec::gaussian(1.0).expect("positive sigma"),
        FairnessSpec::HardThreshold { c_min: 0.0 },
    )
    .expect("valid instance")
}

/// 5x3 Gaussian instance used for the delta sweep.
pub fn asymptotic_scaling() -> Instance {
    parse(ASYMPTOTIC)
}

/// The 5x3 instance with the first-subpopulation mean of policy 3 set to `-eps`.
pub fn sensitivity(eps: f64) -> Instance {
    let base = asymptotic_scaling();
    let mut mu = base.means().clone();
    mu.set(2, 0, -eps);
    base.with_means(mu).expect("valid instance")
}

/// 10x3 instance under the hard threshold.
pub fn extension_hard() -> Instance {
    parse(EXTENSION)
}

/// 10x3 instance with uniform penalty `gamma`.
pub fn extension_penalized(gamma: f64) -> Instance {
    let base = extension_hard();
    base.with_fairness(FairnessSpec::Penalized {
        c_min: base.c_min().expect("hard threshold fixture"),
        gamma: vec![gamma; base.num_subpops()],
    })
    .expect("valid instance")
}

pub fn ist_cells() -> CellMeanFixture {
    CellMeanFixture::from_json_str(IST_CELLS).expect("bundled fixture parses")
}

/// IST cell means as a Bernoulli instance at `C_min = 5/6`.
pub fn ist_instance() -> Instance {
    ist_cells()
        .instance(FairnessSpec::HardThreshold { c_min: IST_C_MIN })
        .expect("valid instance")
}

/// Frozen realization of the misspecification family (`k` in 20, 50, 100).
pub fn misspec(k: usize) -> Option<Instance> {
    match k {
        20 => Some(parse(MISSPEC_20)),
        50 => Some(parse(MISSPEC_50)),
        100 => Some(parse(MISSPEC_100)),
        _ => None,
    }
}

/// Every policy fails the threshold: `((-1, 0.5), (0.5, -2))`, `C_min = 0`.
pub fn all_infeasible_2x2() -> Instance {
    Instance::new(
        CellMatrix::from_rows(&[vec![-1.0, 0.5], vec![0.5, -2.0]]),
        vec![0.5, 0.5],
        FamilySpec::gaussian(1.0).expect("positive sigma"),
        FairnessSpec::HardThreshold { c_min: 0.0 },
    )
    .expect("valid instance")
}

/// Named instance lookup for the CLI.
pub fn by_name(name: &str) -> Option<Instance> {
    match name {
        "asymptotic" | "asymptotic_5x3" => Some(asymptotic_scaling()),
        "extension" | "extension_10x3" => Some(extension_hard()),
        "ist" => Some(ist_instance()),
        "example2" => Some(example2(0.5)),
        "misspec_k20" => misspec(20),
        "misspec_k50" => misspec(50),
        "misspec_k100" => misspec(100),
        _ => None,
    }
}

pub fn all_bundled_instances() -> Vec<Instance> {
    let mut out = vec![
        example2(0.1),
        example2(0.5),
        asymptotic_scaling(),
        extension_hard(),
        extension_penalized(0.5),
        extension_penalized(1.0),
        extension_penalized(5.0),
        extension_penalized(10.0),
        ist_instance(),
    ];
    out.extend([0.1, 0.3, 0.6, 0.9, 1.2].map(sensitivity));
    out.extend([20, 50, 100].iter().filter_map(|&k| misspec(k)));
    out
}
