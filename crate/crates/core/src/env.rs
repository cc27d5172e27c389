//! Sampling environments and reproducible random streams.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cells::CellMatrix;
use crate::error::{Error, Result};
use crate::expfamily::{FamilyKind, FamilySpec};
use crate::instance::{FairnessSpec, Instance};

/// Random stream owned by one replication.
pub type Stream = ChaCha8Rng;

/// Independent stream for replication `index` under `master_seed`.
pub fn replication_stream(master_seed: u64, index: u64) -> Stream {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    /// Draws from the family at each cell mean.
    Parametric {
        family: FamilySpec,
        means: CellMatrix,
    },
    /// Uniform draws with replacement from per-cell outcome pools (row-major).
    BootstrapRecords {
        rows: usize,
        cols: usize,
        pools: Vec<Vec<f64>>,
    },
    /// Bernoulli draws at fixed cell means.
    CellMeanBernoulli { means: CellMatrix },
}

impl Environment {
    pub fn parametric(instance: &Instance) -> Self {
        Environment::Parametric {
            family: *instance.family(),
            means: instance.means().clone(),
        }
    }

    pub fn cell_mean_bernoulli(means: CellMatrix) -> Result<Self> {
        if means.as_slice().iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("cell means must be finite"));
        }
        Ok(Environment::CellMeanBernoulli {
            means: means.map(|m| m.clamp(0.0, 1.0)),
        })
    }

    pub fn bootstrap(rows: usize, cols: usize, pools: Vec<Vec<f64>>) -> Result<Self> {
        if pools.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} pools for a {rows}x{cols} grid",
                pools.len()
            )));
        }
        if let Some(i) = pools.iter().position(Vec::is_empty) {
            return Err(Error::EnvironmentExhausted(format!(
                "pool for cell ({}, {}) is empty",
                i / cols,
                i % cols
            )));
        }
        Ok(Environment::BootstrapRecords { rows, cols, pools })
    }

    pub fn num_policies(&self) -> usize {
        match self {
            Environment::Parametric { means, .. } | Environment::CellMeanBernoulli { means } => {
                means.rows()
            }
            Environment::BootstrapRecords { rows, .. } => *rows,
        }
    }

    pub fn num_subpops(&self) -> usize {
        match self {
            Environment::Parametric { means, .. } | Environment::CellMeanBernoulli { means } => {
                means.cols()
            }
            Environment::BootstrapRecords { cols, .. } => *cols,
        }
    }

    /// Expected outcome per cell.
    pub fn cell_means(&self) -> CellMatrix {
        match self {
            Environment::Parametric { means, .. } | Environment::CellMeanBernoulli { means } => {
                means.clone()
            }
            Environment::BootstrapRecords { rows, cols, pools } => CellMatrix::from_row_major(
                *rows,
                *cols,
                pools
                    .iter()
                    .map(|p| p.iter().sum::<f64>() / p.len() as f64)
                    .collect(),
            ),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, k: usize, l: usize, rng: &mut R) -> Result<f64> {
        let (kk, ll) = (self.num_policies(), self.num_subpops());
        if k >= kk {
            return Err(Error::IndexOutOfRange { index: k, len: kk });
        }
        if l >= ll {
            return Err(Error::IndexOutOfRange { index: l, len: ll });
        }
        Ok(match self {
            Environment::Parametric { family, means } => {
                let m = means.get(k, l);
                match family.kind {
                    FamilyKind::GaussianKnownVariance => Normal::new(m, family.sigma)
                        .expect("sigma validated")
                        .sample(rng),
                    FamilyKind::Bernoulli => bernoulli(m, rng),
                }
            }
            Environment::CellMeanBernoulli { means } => bernoulli(means.get(k, l), rng),
            Environment::BootstrapRecords { cols, pools, .. } => {
                let pool = &pools[k * cols + l];
                pool[rng.random_range(0..pool.len())]
            }
        })
    }
}

#[inline]
fn bernoulli<R: Rng + ?Sized>(p: f64, rng: &mut R) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLabels {
    pub policies: Vec<String>,
    pub subpops: Vec<String>,
}

/// Published cell means with pool sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeanFixture {
    pub labels: CellLabels,
    pub q: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub pool_sizes: Vec<Vec<u64>>,
}

impl CellMeanFixture {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(s)?;
        f.validate()?;
        Ok(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        let k = self.labels.policies.len();
        let l = self.labels.subpops.len();
        if self.means.len() != k || self.means.iter().any(|r| r.len() != l) {
            return Err(Error::Config("means shape does not match labels".into()));
        }
        if self.pool_sizes.len() != k || self.pool_sizes.iter().any(|r| r.len() != l) {
            return Err(Error::Config(
                "pool_sizes shape does not match labels".into(),
            ));
        }
        if self.q.len() != l {
            return Err(Error::Config(
                "q length does not match subpopulations".into(),
            ));
        }
        if self
            .means
            .iter()
            .flatten()
            .any(|m| !(0.0..=1.0).contains(m))
        {
            return Err(Error::Config("cell means must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn means_matrix(&self) -> CellMatrix {
        CellMatrix::from_rows(&self.means)
    }

    pub fn environment(&self) -> Environment {
        Environment::CellMeanBernoulli {
            means: self.means_matrix(),
        }
    }

    /// Pools with `round(N * mean)` successes, for record-level bootstrapping.
    pub fn synthetic_pools(&self) -> Environment {
        let k = self.means.len();
        let l = self.q.len();
        let pools = self
            .means
            .iter()
            .zip(&self.pool_sizes)
            .flat_map(|(mr, nr)| {
                mr.iter().zip(nr).map(|(&m, &n)| {
                    let ones = (m * n as f64).round() as usize;
                    let mut p = vec![1.0; ones];
                    p.resize(n as usize, 0.0);
                    p
                })
            })
            .collect();
        Environment::BootstrapRecords {
            rows: k,
            cols: l,
            pools,
        }
    }

    pub fn instance(&self, fairness: FairnessSpec) -> Result<Instance> {
        Instance::new(
            self.means_matrix(),
            self.q.clone(),
            FamilySpec::bernoulli(),
            fairness,
        )
    }
}

/// Column mapping for record-level CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RecordSchema {
    /// One row per record: policy label, subpopulation label, outcome.
    Simple {
        policy: String,
        subpop: String,
        outcome: String,
        /// Fixed label order; discovered labels are sorted when absent.
        policies: Option<Vec<String>>,
        subpops: Option<Vec<String>>,
    },
    /// IST-style release: aspirin/heparin allocation, age, five 14-day indicators.
    IstComposite {
        aspirin: String,
        heparin: String,
        age: String,
        age_cutoff: f64,
    },
}

impl RecordSchema {
    pub fn simple(policy: &str, subpop: &str, outcome: &str) -> Self {
        RecordSchema::Simple {
            policy: policy.into(),
            subpop: subpop.into(),
            outcome: outcome.into(),
            policies: None,
            subpops: None,
        }
    }

    pub fn ist() -> Self {
        RecordSchema::IstComposite {
            aspirin: "RXASP".into(),
            heparin: "RXHEP".into(),
            age: "AGE".into(),
            age_cutoff: 80.0,
        }
    }
}

pub const IST_POLICIES: [&str; 4] = ["Aspirin only", "Heparin only", "Both", "Neither"];
pub const IST_SUBPOPS: [&str; 2] = ["Age < 80", "Age >= 80"];
pub const IST_EVENTS: [&str; 5] = ["ID14", "ISC14", "H14", "TRAN14", "NCB14"];

#[derive(Debug, Clone)]
pub struct RecordData {
    pub environment: Environment,
    pub labels: CellLabels,
    pub sizes: Vec<Vec<usize>>,
    pub means: Vec<Vec<f64>>,
    /// Share of loaded records per subpopulation.
    pub q: Vec<f64>,
    /// Rows skipped because a field could not be mapped.
    pub skipped: Vec<(usize, String)>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Load {
            row: 0,
            column: name.into(),
            message: "missing column".into(),
        })
}

/// `1`/`Y` as true, `0`/`N` as false.
fn flag(v: &str) -> Option<bool> {
    match v.trim() {
        "1" | "Y" | "y" => Some(true),
        "0" | "N" | "n" => Some(false),
        _ => None,
    }
}

pub fn load_records_csv(path: impl AsRef<Path>, schema: &RecordSchema) -> Result<RecordData> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut records: Vec<(String, String, f64)> = Vec::new();
    let mut skipped = Vec::new();
    match schema {
        RecordSchema::Simple {
            policy,
            subpop,
            outcome,
            ..
        } => {
            let (pc, sc, oc) = (
                column(&headers, policy)?,
                column(&headers, subpop)?,
                column(&headers, outcome)?,
            );
            for (i, rec) in reader.records().enumerate() {
                let rec = rec?;
                let row = i + 1;
                let get = |c: usize, name: &str| -> Result<String> {
                    rec.get(c)
                        .map(|s| s.trim().to_string())
                        .ok_or_else(|| Error::Load {
                            row,
                            column: name.into(),
                            message: "missing field".into(),
                        })
                };
                let raw = get(oc, outcome)?;
                let y = match flag(&raw) {
                    Some(b) => f64::from(u8::from(b)),
                    None => raw.parse::<f64>().map_err(|_| Error::Load {
                        row,
                        column: outcome.clone(),
                        message: format!("cannot parse outcome '{raw}'"),
                    })?,
                };
                records.push((get(pc, policy)?, get(sc, subpop)?, y));
            }
        }
        RecordSchema::IstComposite {
            aspirin,
            heparin,
            age,
            age_cutoff,
        } => {
            let ac = column(&headers, aspirin)?;
            let hc = column(&headers, heparin)?;
            let agec = column(&headers, age)?;
            let events: Vec<usize> = IST_EVENTS
                .iter()
                .map(|e| column(&headers, e))
                .collect::<Result<_>>()?;
            for (i, rec) in reader.records().enumerate() {
                let rec = rec?;
                let row = i + 1;
                let field = |c: usize| rec.get(c).unwrap_or("").trim();
                let asp = flag(field(ac));
                // heparin arms are coded by dose; anything but N is treated
                let hep = match field(hc) {
                    "N" | "0" => Some(false),
                    "" => None,
                    v if v.chars().all(|ch| ch.is_ascii_alphanumeric()) => Some(true),
                    _ => None,
                };
                let (Some(asp), Some(hep)) = (asp, hep) else {
                    skipped.push((row, "unmapped treatment".into()));
                    continue;
                };
                let Ok(a) = field(agec).parse::<f64>() else {
                    skipped.push((row, "unparseable age".into()));
                    continue;
                };
                let flags: Option<Vec<bool>> = events.iter().map(|&c| flag(field(c))).collect();
                let Some(flags) = flags else {
                    skipped.push((row, "unmapped outcome indicator".into()));
                    continue;
                };
                let policy = match (asp, hep) {
                    (true, false) => IST_POLICIES[0],
                    (false, true) => IST_POLICIES[1],
                    (true, true) => IST_POLICIES[2],
                    (false, false) => IST_POLICIES[3],
                };
                let sub = if a >= *age_cutoff {
                    IST_SUBPOPS[1]
                } else {
                    IST_SUBPOPS[0]
                };
                let y = if flags.iter().any(|&f| f) { 0.0 } else { 1.0 };
                records.push((policy.to_string(), sub.to_string(), y));
            }
        }
    }
    for (row, why) in &skipped {
        log::warn!("row {row} skipped: {why}");
    }
    let (policies, subpops) = match schema {
        RecordSchema::Simple {
            policies, subpops, ..
        } => (
            policies
                .clone()
                .unwrap_or_else(|| sorted_labels(records.iter().map(|r| &r.0))),
            subpops
                .clone()
                .unwrap_or_else(|| sorted_labels(records.iter().map(|r| &r.1))),
        ),
        RecordSchema::IstComposite { .. } => (
            IST_POLICIES.iter().map(|s| s.to_string()).collect(),
            IST_SUBPOPS.iter().map(|s| s.to_string()).collect(),
        ),
    };
    let (pcol, scol) = match schema {
        RecordSchema::Simple { policy, subpop, .. } => (policy.clone(), subpop.clone()),
        RecordSchema::IstComposite { aspirin, age, .. } => (aspirin.clone(), age.clone()),
    };
    let kk = policies.len();
    let ll = subpops.len();
    let mut pools: Vec<Vec<f64>> = vec![Vec::new(); kk * ll];
    for (i, (p, s, y)) in records.iter().enumerate() {
        let k = policies
            .iter()
            .position(|x| x == p)
            .ok_or_else(|| Error::Load {
                row: i + 1,
                column: pcol.clone(),
                message: format!("unknown policy label '{p}'"),
            })?;
        let l = subpops
            .iter()
            .position(|x| x == s)
            .ok_or_else(|| Error::Load {
                row: i + 1,
                column: scol.clone(),
                message: format!("unknown subpopulation label '{s}'"),
            })?;
        pools[k * ll + l].push(*y);
    }
    if let Some(i) = pools.iter().position(Vec::is_empty) {
        return Err(Error::Load {
            row: 0,
            column: pcol,
            message: format!(
                "cell ({}, {}) has no records",
                policies[i / ll],
                subpops[i % ll]
            ),
        });
    }
    let sizes: Vec<Vec<usize>> = (0..kk)
        .map(|k| (0..ll).map(|l| pools[k * ll + l].len()).collect())
        .collect();
    let means: Vec<Vec<f64>> = (0..kk)
        .map(|k| {
            (0..ll)
                .map(|l| {
                    let p = &pools[k * ll + l];
                    p.iter().sum::<f64>() / p.len() as f64
                })
                .collect()
        })
        .collect();
    let total = records.len() as f64;
    let q: Vec<f64> = (0..ll)
        .map(|l| (0..kk).map(|k| sizes[k][l]).sum::<usize>() as f64 / total)
        .collect();
    for k in 0..kk {
        log::info!(
            "{}: sizes {:?}, means {:?}",
            policies[k],
            sizes[k],
            means[k]
        );
    }
    Ok(RecordData {
        environment: Environment::bootstrap(kk, ll, pools)?,
        labels: CellLabels { policies, subpops },
        sizes,
        means,
        q,
        skipped,
    })
}

fn sorted_labels<'a>(it: impl Iterator<Item = &'a String>) -> Vec<String> {
    let set: BTreeMap<&String, ()> = it.map(|s| (s, ())).collect();
    set.into_keys().cloned().collect()
}
