//! Replication campaigns: experiment specs, parallel execution, aggregation
//! and table output.
//!
//! Each replication is addressed by `(seed, key index, replication index)` and
//! owns its random stream, so results do not depend on the worker count and a
//! campaign can resume from the per-replication cache in its output directory.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run_tas_baseline, run_tascs, run_uniform_baseline, EngineConfig, RunResult};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::fixtures;
use crate::instance::{policy_label, FairnessSpec, Instance, Membership};
use crate::weights::{solve_oracle, OracleConfig};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Replications computed between cache flushes, per worker.
const CHUNK_PER_WORKER: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    DeltaSweep,
    Sensitivity,
    GammaSweep,
    FixedBudgetPcs,
    TstarOnly,
    SingleRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocator {
    Tascs,
    Tas,
    Uniform,
}

impl Allocator {
    pub fn name(self) -> &'static str {
        match self {
            Allocator::Tascs => "tascs",
            Allocator::Tas => "tas",
            Allocator::Uniform => "uniform",
        }
    }

    fn run(self, truth: &Instance, env: &Environment, config: &EngineConfig) -> Result<RunResult> {
        match self {
            Allocator::Tascs => run_tascs(truth, env, config),
            Allocator::Tas => run_tas_baseline(truth, env, config),
            Allocator::Uniform => run_uniform_baseline(truth, env, config),
        }
    }
}

impl std::str::FromStr for Allocator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tascs" => Ok(Allocator::Tascs),
            "tas" => Ok(Allocator::Tas),
            "uniform" => Ok(Allocator::Uniform),
            other => Err(Error::Config(format!(
                "unknown allocator '{other}' (tascs, tas, uniform)"
            ))),
        }
    }
}

/// Where samples come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvironmentSource {
    /// Draw from the instance's own family at its means.
    #[default]
    Parametric,
    /// Bootstrap over record pools rebuilt from the bundled IST cell summary.
    IstPools,
    /// Bootstrap over pools rebuilt from a cell-mean JSON file.
    CellMeanPools { path: String },
}

fn default_replications() -> usize {
    1
}

fn default_allocators() -> Vec<Allocator> {
    vec![Allocator::Tascs]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    /// Bundled instance name or path to an instance JSON file.
    pub instance: String,
    #[serde(default)]
    pub environment: EnvironmentSource,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Replication count of the full-scale study, used with `--paper`.
    #[serde(default)]
    pub paper_replications: Option<usize>,
    #[serde(default)]
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub checkpoints: Vec<u64>,
    #[serde(default = "default_allocators")]
    pub allocators: Vec<Allocator>,
    /// 1-based cell set to `c_min - eps` in a sensitivity sweep.
    #[serde(default)]
    pub sensitivity_cell: Option<(usize, usize)>,
    /// Add `T*` of the base instance to delta-sweep and single-run rows.
    #[serde(default)]
    pub tstar: bool,
    #[serde(default)]
    pub heatmap: bool,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: Self =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    /// Bundled manifest by name, or a manifest file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match fixtures::manifest(name_or_path) {
            Some(text) => Self::from_json_str(text),
            None => Self::load(name_or_path),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.replications < 1 {
            return cfg("replications must be at least 1".into());
        }
        if self.checkpoints.windows(2).any(|p| p[0] >= p[1]) {
            return cfg("checkpoints must be strictly increasing".into());
        }
        if self.allocators.is_empty() {
            return cfg("at least one allocator is required".into());
        }
        if self.deltas.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
            return cfg("deltas must lie in (0, 1)".into());
        }
        if self.gammas.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
            return cfg("gammas must be finite and nonnegative".into());
        }
        if self.epsilons.iter().any(|e| !e.is_finite()) {
            return cfg("epsilons must be finite".into());
        }
        let stopping = matches!(
            self.kind,
            ExperimentKind::DeltaSweep | ExperimentKind::Sensitivity | ExperimentKind::GammaSweep
        );
        if stopping && self.allocators.iter().any(|&a| a != Allocator::Tascs) {
            return cfg("baseline allocators need a fixed budget; use fixed_budget_pcs".into());
        }
        if stopping && self.engine.budget.is_some() {
            return cfg("stopping-time sweeps cannot set a budget".into());
        }
        match self.kind {
            ExperimentKind::DeltaSweep if self.deltas.is_empty() => {
                cfg("delta_sweep needs deltas".into())
            }
            ExperimentKind::Sensitivity if self.epsilons.is_empty() => {
                cfg("sensitivity needs epsilons".into())
            }
            ExperimentKind::GammaSweep if self.gammas.is_empty() => {
                cfg("gamma_sweep needs gammas".into())
            }
            ExperimentKind::FixedBudgetPcs
                if self.checkpoints.is_empty() && self.engine.budget.is_none() =>
            {
                cfg("fixed_budget_pcs needs checkpoints or a budget".into())
            }
            ExperimentKind::SingleRun
                if self.engine.budget.is_none()
                    && self.allocators.iter().any(|&a| a != Allocator::Tascs) =>
            {
                cfg("baseline allocators need a budget".into())
            }
            _ => Ok(()),
        }
    }

    fn budget(&self) -> Option<u64> {
        match self.kind {
            ExperimentKind::FixedBudgetPcs => {
                self.engine.budget.or(self.checkpoints.last().copied())
            }
            _ => self.engine.budget,
        }
    }
}

/// Bundled instance by name, or an instance JSON file.
pub fn resolve_instance(name_or_path: &str) -> Result<Instance> {
    if let Some(inst) = fixtures::by_name(name_or_path) {
        return Ok(inst);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(Error::Config(format!("unknown instance '{name_or_path}'")));
    }
    Instance::load(path)
}

fn build_environment(source: &EnvironmentSource, truth: &Instance) -> Result<Environment> {
    let env = match source {
        EnvironmentSource::Parametric => Environment::parametric(truth),
        EnvironmentSource::IstPools => fixtures::ist_cells().synthetic_pools(),
        EnvironmentSource::CellMeanPools { path } => {
            crate::env::CellMeanFixture::load(path)?.synthetic_pools()
        }
    };
    if env.num_policies() != truth.num_policies() || env.num_subpops() != truth.num_subpops() {
        return Err(Error::Config(format!(
            "environment is {}x{} but the instance is {}x{}",
            env.num_policies(),
            env.num_subpops(),
            truth.num_policies(),
            truth.num_subpops()
        )));
    }
    Ok(env)
}

/// One replication, reduced to what aggregation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub key_index: usize,
    pub allocator: Allocator,
    pub index: u64,
    pub tau: u64,
    pub stopped: bool,
    pub timed_out: bool,
    /// 0 for "nothing feasible", otherwise the 1-based policy.
    pub recommendation: usize,
    pub correct: bool,
    /// Correctness at each spec checkpoint.
    pub checkpoints: Vec<bool>,
    pub tracking_ok: bool,
    /// Final `N / tau` in row-major order, kept for heatmaps only.
    #[serde(default)]
    pub proportions: Vec<f64>,
    /// Set when the replication failed or its environment ran dry.
    pub error: Option<String>,
}

impl ReplicationRecord {
    fn failed(key_index: usize, allocator: Allocator, index: u64, msg: String) -> Self {
        Self {
            key_index,
            allocator,
            index,
            tau: 0,
            stopped: false,
            timed_out: false,
            recommendation: 0,
            correct: false,
            checkpoints: Vec::new(),
            tracking_ok: true,
            proportions: Vec::new(),
            error: Some(msg),
        }
    }
}

/// Aggregate statistics for one table row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    /// What `key` holds: delta, epsilon, gamma, checkpoint or run.
    pub key_name: String,
    pub key: f64,
    pub allocator: String,
    /// Successful replications.
    pub n: usize,
    pub failures: usize,
    pub timeouts: usize,
    pub tracking_violations: usize,
    pub mean_tau: Option<f64>,
    pub se_tau: Option<f64>,
    pub std_tau: Option<f64>,
    /// Half-width of the 95% normal interval for the mean stopping time.
    pub tau_ci_95: Option<f64>,
    pub pcs: Option<f64>,
    /// Half-width `1.96 sqrt(p (1 - p) / n)`.
    pub pcs_ci_95: Option<f64>,
    /// Normal interval clipped to [0, 1]; Wilson when `pcs` is 0 or 1.
    pub pcs_ci_low: Option<f64>,
    pub pcs_ci_high: Option<f64>,
    pub ratio_tau_over_log: Option<f64>,
    pub ratio_se: Option<f64>,
    pub t_star: Option<f64>,
    /// 1-based best policy of the row's instance (0 when none is feasible).
    pub best_policy: Option<usize>,
}

impl AggregateRow {
    fn empty(key_name: &str, key: f64, allocator: &str) -> Self {
        Self {
            key_name: key_name.to_string(),
            key,
            allocator: allocator.to_string(),
            n: 0,
            failures: 0,
            timeouts: 0,
            tracking_violations: 0,
            mean_tau: None,
            se_tau: None,
            std_tau: None,
            tau_ci_95: None,
            pcs: None,
            pcs_ci_95: None,
            pcs_ci_low: None,
            pcs_ci_high: None,
            ratio_tau_over_log: None,
            ratio_se: None,
            t_star: None,
            best_policy: None,
        }
    }

    /// Attach `tau / ln(1/delta)` and its standard error.
    pub fn with_log_ratio(mut self, delta: f64) -> Self {
        let lg = (1.0 / delta).ln();
        self.ratio_tau_over_log = self.mean_tau.map(|m| m / lg);
        self.ratio_se = self.se_tau.map(|s| s / lg);
        self
    }
}

/// Per-replication outcome fed to [`summarize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub tau: u64,
    pub correct: bool,
    pub timed_out: bool,
    pub tracking_ok: bool,
}

/// Wilson score interval for `successes` out of `n`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let hi = if successes as f64 == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    (lo, hi)
}

/// Mean, spread and PCS of a set of outcomes. Standard errors are `None` for
/// a single outcome; every statistic is `None` when there are none.
pub fn summarize(
    key_name: &str,
    key: f64,
    allocator: &str,
    outcomes: &[Outcome],
    failures: usize,
) -> AggregateRow {
    let mut row = AggregateRow::empty(key_name, key, allocator);
    row.failures = failures;
    let n = outcomes.len();
    row.n = n;
    if n == 0 {
        return row;
    }
    row.timeouts = outcomes.iter().filter(|o| o.timed_out).count();
    row.tracking_violations = outcomes.iter().filter(|o| !o.tracking_ok).count();
    let nf = n as f64;
    let mean = outcomes.iter().map(|o| o.tau as f64).sum::<f64>() / nf;
    row.mean_tau = Some(mean);
    if n > 1 {
        let var = outcomes
            .iter()
            .map(|o| (o.tau as f64 - mean).powi(2))
            .sum::<f64>()
            / (nf - 1.0);
        let sd = var.sqrt();
        let se = sd / nf.sqrt();
        row.std_tau = Some(sd);
        row.se_tau = Some(se);
        row.tau_ci_95 = Some(Z95 * se);
    }
    let wins = outcomes.iter().filter(|o| o.correct).count();
    let p = wins as f64 / nf;
    let half = Z95 * (p * (1.0 - p) / nf).sqrt();
    row.pcs = Some(p);
    row.pcs_ci_95 = Some(half);
    let (lo, hi) = if wins == 0 || wins == n {
        wilson_interval(wins, n, Z95)
    } else {
        ((p - half).max(0.0), (p + half).min(1.0))
    };
    row.pcs_ci_low = Some(lo);
    row.pcs_ci_high = Some(hi);
    row
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub key_name: String,
    pub key: f64,
    pub allocator: String,
    /// 1-based policy.
    pub k: usize,
    /// 1-based subpopulation.
    pub l: usize,
    /// Mean of `N_{k,l}(tau) / tau` over successful replications.
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub rows: Vec<AggregateRow>,
    pub heatmap: Vec<HeatmapRow>,
    /// Failed replications over the whole campaign.
    pub failures: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 means the spec's value, then the rayon default.
    pub workers: usize,
    /// Per-replication cache (JSON lines) read on start and appended to.
    pub cache: Option<PathBuf>,
}

/// One row key of a campaign with its instance.
struct KeyCase {
    value: f64,
    instance: Instance,
    delta: f64,
}

fn key_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::DeltaSweep => "delta",
        ExperimentKind::Sensitivity => "epsilon",
        ExperimentKind::GammaSweep | ExperimentKind::TstarOnly => "gamma",
        ExperimentKind::FixedBudgetPcs => "checkpoint",
        ExperimentKind::SingleRun => "run",
    }
}

fn key_cases(spec: &ExperimentSpec, base: &Instance) -> Result<Vec<KeyCase>> {
    let delta = spec.engine.delta;
    let case = |value: f64, instance: Instance, delta: f64| KeyCase {
        value,
        instance,
        delta,
    };
    match spec.kind {
        ExperimentKind::DeltaSweep => Ok(spec
            .deltas
            .iter()
            .map(|&d| case(d, base.clone(), d))
            .collect()),
        ExperimentKind::Sensitivity => {
            let c = base.c_min().ok_or(Error::Config(
                "sensitivity sweeps need a threshold instance".into(),
            ))?;
            let (k, l) = spec.sensitivity_cell.unwrap_or((3, 1));
            if k == 0 || l == 0 || k > base.num_policies() || l > base.num_subpops() {
                return Err(Error::Config(format!(
                    "sensitivity cell ({k}, {l}) is outside the instance"
                )));
            }
            spec.epsilons
                .iter()
                .map(|&e| {
                    let mut mu = base.means().clone();
                    mu.set(k - 1, l - 1, c - e);
                    Ok(case(e, base.with_means(mu)?, delta))
                })
                .collect()
        }
        ExperimentKind::GammaSweep | ExperimentKind::TstarOnly if !spec.gammas.is_empty() => {
            let c = base.c_min().ok_or(Error::Config(
                "gamma sweeps need a threshold instance".into(),
            ))?;
            spec.gammas
                .iter()
                .map(|&g| {
                    let inst = base.with_fairness(FairnessSpec::Penalized {
                        c_min: c,
                        gamma: vec![g; base.num_subpops()],
                    })?;
                    Ok(case(g, inst, delta))
                })
                .collect()
        }
        _ => Ok(vec![case(0.0, base.clone(), delta)]),
    }
}

/// `T*` of an instance, or `None` when it is outside the identifiable class.
fn tstar_of(instance: &Instance, oracle: &OracleConfig) -> Result<Option<f64>> {
    if let Membership::NotInS(reason) = instance.validate_in_s(crate::weights::GAMMA_TIE_MARGIN) {
        log::warn!("T* undefined: {reason:?}");
        return Ok(None);
    }
    Ok(Some(solve_oracle(instance, oracle)?.t_star))
}

fn needs_tstar(spec: &ExperimentSpec) -> bool {
    spec.tstar
        || matches!(
            spec.kind,
            ExperimentKind::Sensitivity | ExperimentKind::GammaSweep | ExperimentKind::TstarOnly
        )
}

fn stream_index(key_index: usize, rep: u64) -> u64 {
    ((key_index as u64) << 32) | rep
}

fn run_replication(
    spec: &ExperimentSpec,
    case: &KeyCase,
    env: &Environment,
    key_index: usize,
    allocator: Allocator,
    rep: u64,
) -> ReplicationRecord {
    let config = EngineConfig {
        delta: case.delta,
        seed: spec.seed,
        stream: stream_index(key_index, rep),
        budget: spec.budget(),
        checkpoints: spec.checkpoints.clone(),
        record_trajectory: false,
        ..spec.engine.clone()
    };
    let result = match allocator.run(&case.instance, env, &config) {
        Ok(r) => r,
        Err(e) => return ReplicationRecord::failed(key_index, allocator, rep, e.to_string()),
    };
    if let Some(reason) = result.aborted.clone() {
        return ReplicationRecord::failed(key_index, allocator, rep, reason);
    }
    let tau = result.tau.max(1) as f64;
    ReplicationRecord {
        key_index,
        allocator,
        index: rep,
        tau: result.tau,
        stopped: result.stopped,
        timed_out: result.timed_out,
        recommendation: policy_label(result.recommendation),
        correct: result.correct.unwrap_or(false),
        checkpoints: result
            .checkpoints
            .iter()
            .map(|c| c.correct.unwrap_or(false))
            .collect(),
        tracking_ok: allocator != Allocator::Tascs || result.tracking.holds(),
        proportions: if spec.heatmap {
            result
                .final_counts
                .as_slice()
                .iter()
                .map(|n| n / tau)
                .collect()
        } else {
            Vec::new()
        },
        error: None,
    }
}

type RecordKey = (usize, Allocator, u64);

fn load_cache(path: &Path) -> Result<HashMap<RecordKey, ReplicationRecord>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // a torn final line from an interrupted run is dropped
        match serde_json::from_str::<ReplicationRecord>(&line) {
            Ok(r) => {
                out.insert((r.key_index, r.allocator, r.index), r);
            }
            Err(e) => log::warn!(
                "{}:{}: skipping unreadable cache line: {e}",
                path.display(),
                i + 1
            ),
        }
    }
    Ok(out)
}

fn append_cache(path: &Path, records: &[ReplicationRecord]) -> Result<()> {
    let mut f = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        b = b.num_threads(workers);
    }
    b.build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Run every replication of `spec` and aggregate the table.
pub fn run_experiment(spec: &ExperimentSpec, options: &RunOptions) -> Result<ExperimentOutput> {
    spec.validate()?;
    let base = resolve_instance(&spec.instance)?;
    let cases = key_cases(spec, &base)?;
    let env = build_environment(&spec.environment, &base)?;
    let workers = if options.workers > 0 {
        options.workers
    } else {
        spec.workers.unwrap_or(0)
    };
    let pool = thread_pool(workers)?;

    let tstars: Vec<Option<f64>> = if needs_tstar(spec) {
        pool.install(|| {
            cases
                .par_iter()
                .map(|c| tstar_of(&c.instance, &spec.oracle))
                .collect::<Result<_>>()
        })?
    } else {
        vec![None; cases.len()]
    };

    let mut records: Vec<ReplicationRecord> = Vec::new();
    if spec.kind != ExperimentKind::TstarOnly {
        let mut cache = match &options.cache {
            Some(p) => load_cache(p)?,
            None => HashMap::new(),
        };
        let mut todo: Vec<RecordKey> = Vec::new();
        for ki in 0..cases.len() {
            for &a in &spec.allocators {
                for rep in 0..spec.replications as u64 {
                    if !cache.contains_key(&(ki, a, rep)) {
                        todo.push((ki, a, rep));
                    }
                }
            }
        }
        log::info!(
            "{}: {} replications to run, {} cached",
            spec.name,
            todo.len(),
            cache.len()
        );
        let chunk = CHUNK_PER_WORKER * pool.current_num_threads().max(1);
        for part in todo.chunks(chunk) {
            let done: Vec<ReplicationRecord> = pool.install(|| {
                part.par_iter()
                    .map(|&(ki, a, rep)| run_replication(spec, &cases[ki], &env, ki, a, rep))
                    .collect()
            });
            if let Some(p) = &options.cache {
                append_cache(p, &done)?;
            }
            for r in done {
                cache.insert((r.key_index, r.allocator, r.index), r);
            }
        }
        for ki in 0..cases.len() {
            for &a in &spec.allocators {
                for rep in 0..spec.replications as u64 {
                    records.push(
                        cache
                            .remove(&(ki, a, rep))
                            .expect("every replication was computed"),
                    );
                }
            }
        }
    }
    Ok(aggregate(spec, &base, &cases, &tstars, &records))
}

fn aggregate(
    spec: &ExperimentSpec,
    base: &Instance,
    cases: &[KeyCase],
    tstars: &[Option<f64>],
    records: &[ReplicationRecord],
) -> ExperimentOutput {
    let name = key_name(spec.kind);
    let mut rows = Vec::new();
    let mut heatmap = Vec::new();
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    let group = |ki: usize, a: Allocator| {
        records
            .iter()
            .filter(move |r| r.key_index == ki && r.allocator == a)
    };
    let outcome = |r: &ReplicationRecord, correct: bool| Outcome {
        tau: r.tau,
        correct,
        timed_out: r.timed_out,
        tracking_ok: r.tracking_ok,
    };

    match spec.kind {
        ExperimentKind::TstarOnly => {
            for (case, ts) in cases.iter().zip(tstars) {
                let mut row = AggregateRow::empty(name, case.value, "oracle");
                row.t_star = *ts;
                row.best_policy = Some(policy_label(case.instance.best_policy()));
                rows.push(row);
            }
        }
        ExperimentKind::FixedBudgetPcs => {
            let truth = base.best_policy();
            let checkpoints: Vec<u64> = if spec.checkpoints.is_empty() {
                vec![spec.budget().unwrap_or(0)]
            } else {
                spec.checkpoints.clone()
            };
            for (ci, &t) in checkpoints.iter().enumerate() {
                for &a in &spec.allocators {
                    let ok: Vec<&ReplicationRecord> =
                        group(0, a).filter(|r| r.error.is_none()).collect();
                    let outs: Vec<Outcome> = ok
                        .iter()
                        .map(|r| {
                            let correct = if spec.checkpoints.is_empty() {
                                r.correct
                            } else {
                                r.checkpoints[ci]
                            };
                            Outcome {
                                tau: t,
                                ..outcome(r, correct)
                            }
                        })
                        .collect();
                    let fails = group(0, a).count() - ok.len();
                    let mut row = summarize(name, t as f64, a.name(), &outs, fails);
                    row.best_policy = Some(policy_label(truth));
                    rows.push(row);
                }
            }
        }
        _ => {
            for (ki, case) in cases.iter().enumerate() {
                for &a in &spec.allocators {
                    let ok: Vec<&ReplicationRecord> =
                        group(ki, a).filter(|r| r.error.is_none()).collect();
                    let outs: Vec<Outcome> = ok.iter().map(|r| outcome(r, r.correct)).collect();
                    let fails = group(ki, a).count() - ok.len();
                    let mut row = summarize(name, case.value, a.name(), &outs, fails);
                    if spec.engine.budget.is_none() {
                        row = row.with_log_ratio(case.delta);
                    }
                    row.t_star = tstars[ki];
                    row.best_policy = Some(policy_label(case.instance.best_policy()));
                    rows.push(row);
                }
            }
        }
    }

    if spec.heatmap {
        let (kk, ll) = (base.num_policies(), base.num_subpops());
        for (ki, case) in cases.iter().enumerate() {
            for &a in &spec.allocators {
                let ok: Vec<&ReplicationRecord> = group(ki, a)
                    .filter(|r| r.error.is_none() && r.proportions.len() == kk * ll)
                    .collect();
                if ok.is_empty() {
                    continue;
                }
                for k in 0..kk {
                    for l in 0..ll {
                        let p = ok.iter().map(|r| r.proportions[k * ll + l]).sum::<f64>()
                            / ok.len() as f64;
                        heatmap.push(HeatmapRow {
                            key_name: name.to_string(),
                            key: case.value,
                            allocator: a.name().to_string(),
                            k: k + 1,
                            l: l + 1,
                            proportion: p,
                        });
                    }
                }
            }
        }
    }
    ExperimentOutput {
        rows,
        heatmap,
        failures,
    }
}

/// Contents of `manifest.json` in an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub spec: ExperimentSpec,
    pub created: String,
    pub version: String,
    pub failures: Option<usize>,
}

/// Fresh `root/<name>/<timestamp>` directory.
pub fn new_output_dir(root: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S%.3f").to_string();
    let dir = root.as_ref().join(name).join(stamp);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub const CACHE_FILE: &str = "replications.jsonl";

fn write_manifest(dir: &Path, spec: &ExperimentSpec, failures: Option<usize>) -> Result<()> {
    let m = RunManifest {
        spec: spec.clone(),
        created: chrono::Local::now().to_rfc3339(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        failures,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn write_table_csv(path: impl AsRef<Path>, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table_csv(path: impl AsRef<Path>) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

fn write_outputs(dir: &Path, spec: &ExperimentSpec, out: &ExperimentOutput) -> Result<()> {
    write_table_csv(dir.join("table.csv"), &out.rows)?;
    fs::write(
        dir.join("table.json"),
        serde_json::to_string_pretty(&out.rows)?,
    )?;
    if spec.heatmap {
        let mut w = csv::Writer::from_path(dir.join("heatmap.csv"))?;
        for r in &out.heatmap {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    write_manifest(dir, spec, Some(out.failures))
}

/// Run a campaign into a new directory under `root`; returns the directory.
pub fn run_campaign(
    spec: &ExperimentSpec,
    root: impl AsRef<Path>,
    workers: usize,
) -> Result<(PathBuf, ExperimentOutput)> {
    spec.validate()?;
    let dir = new_output_dir(root, &spec.name)?;
    // the manifest goes first so an interrupted campaign can be resumed
    write_manifest(&dir, spec, None)?;
    let out = run_experiment(
        spec,
        &RunOptions {
            workers,
            cache: Some(dir.join(CACHE_FILE)),
        },
    )?;
    write_outputs(&dir, spec, &out)?;
    Ok((dir, out))
}

/// Finish an interrupted campaign from its output directory.
pub fn resume_campaign(dir: impl AsRef<Path>, workers: usize) -> Result<ExperimentOutput> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
    let out = run_experiment(
        &manifest.spec,
        &RunOptions {
            workers,
            cache: Some(dir.join(CACHE_FILE)),
        },
    )?;
    write_outputs(dir, &manifest.spec, &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn outcomes(taus: &[u64], correct: &[bool]) -> Vec<Outcome> {
        taus.iter()
            .zip(correct)
            .map(|(&tau, &correct)| Outcome {
                tau,
                correct,
                timed_out: false,
                tracking_ok: true,
            })
            .collect()
    }

    #[test]
    fn summarize_single_outcome_has_no_se() {
        let r = summarize("delta", 0.1, "tascs", &outcomes(&[42], &[true]), 0);
        assert_eq!(r.mean_tau, Some(42.0));
        assert_eq!(r.se_tau, None);
        assert_eq!(r.std_tau, None);
    }

    #[test]
    fn summarize_all_correct() {
        let r = summarize(
            "delta",
            0.1,
            "tascs",
            &outcomes(&[10; 100], &[true; 100]),
            0,
        );
        assert_eq!(r.pcs, Some(1.0));
        assert_eq!(r.pcs_ci_95, Some(0.0));
        assert_eq!(r.mean_tau, Some(10.0));
        assert_eq!(r.std_tau, Some(0.0));
        let (lo, hi) = (r.pcs_ci_low.unwrap(), r.pcs_ci_high.unwrap());
        assert_eq!(hi, 1.0);
        // Wilson lower bound n / (n + z^2)
        assert_abs_diff_eq!(lo, 100.0 / (100.0 + Z95 * Z95), epsilon = 1e-12);
    }

    #[test]
    fn summarize_mixed() {
        let taus = [10, 20, 30, 40];
        let r = summarize(
            "delta",
            0.1,
            "tascs",
            &outcomes(&taus, &[true, false, true, true]),
            2,
        );
        assert_eq!(r.n, 4);
        assert_eq!(r.failures, 2);
        assert_abs_diff_eq!(r.mean_tau.unwrap(), 25.0);
        let sd = (500.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(r.std_tau.unwrap(), sd, epsilon = 1e-12);
        assert_abs_diff_eq!(r.se_tau.unwrap(), sd / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            r.pcs_ci_95.unwrap(),
            1.96 * (0.75f64 * 0.25 / 4.0).sqrt(),
            epsilon = 1e-12
        );
        let r = r.with_log_ratio(0.1);
        assert_abs_diff_eq!(
            r.ratio_tau_over_log.unwrap(),
            25.0 / 10f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn summarize_nothing() {
        let r = summarize("delta", 0.1, "tascs", &[], 3);
        assert_eq!(r.n, 0);
        assert_eq!(r.pcs, None);
        assert_eq!(r.failures, 3);
    }

    #[test]
    fn wilson_is_inside_unit_interval() {
        for n in 1..50 {
            for s in 0..=n {
                let (lo, hi) = wilson_interval(s, n, Z95);
                let p = s as f64 / n as f64;
                assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
            }
        }
    }

    #[test]
    fn spec_validation() {
        let ok = r#"{"name":"t","kind":"delta_sweep","instance":"asymptotic","deltas":[0.2]}"#;
        assert!(ExperimentSpec::from_json_str(ok).is_ok());
        for bad in [
            r#"{"name":"t","kind":"delta_sweep","instance":"asymptotic","deltas":[]}"#,
            r#"{"name":"t","kind":"delta_sweep","instance":"asymptotic","deltas":[1.5]}"#,
            r#"{"name":"t","kind":"delta_sweep","instance":"asymptotic","deltas":[0.2],"replications":0}"#,
            r#"{"name":"t","kind":"delta_sweep","instance":"asymptotic","deltas":[0.2],"allocators":["tas"]}"#,
            r#"{"name":"t","kind":"fixed_budget_pcs","instance":"asymptotic","checkpoints":[100,50]}"#,
            r#"{"name":"t","kind":"nope","instance":"asymptotic"}"#,
        ] {
            assert!(
                matches!(ExperimentSpec::from_json_str(bad), Err(Error::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn bundled_manifests_parse() {
        for (name, _) in fixtures::MANIFESTS {
            let spec = ExperimentSpec::resolve(name).unwrap();
            assert_eq!(&spec.name, name);
            resolve_instance(&spec.instance).unwrap();
        }
    }

    #[test]
    fn tstar_only_gamma_rows() {
        let spec = ExperimentSpec {
            oracle: OracleConfig {
                max_iters: 2000,
                window: 500,
                ..OracleConfig::default()
            },
            gammas: vec![0.5, 3.0, 5.0],
            ..ExperimentSpec::from_json_str(
                r#"{"name":"g","kind":"tstar_only","instance":"extension"}"#,
            )
            .unwrap()
        };
        let out = run_experiment(&spec, &RunOptions::default()).unwrap();
        assert_eq!(out.rows.len(), 3);
        assert_eq!(out.rows[0].best_policy, Some(4));
        assert!(out.rows[0].t_star.is_some());
        // the leaders tie at gamma = 3
        assert_eq!(out.rows[1].t_star, None);
        assert_eq!(out.rows[2].best_policy, Some(1));
    }

    #[test]
    fn fixed_budget_rows_and_cache_resume() {
        let text = r#"{"name":"p","kind":"fixed_budget_pcs","instance":"example2","replications":6,
            "checkpoints":[60,90],"allocators":["tascs","tas","uniform"],"heatmap":true,"seed":3}"#;
        let spec = ExperimentSpec::from_json_str(text).unwrap();
        let full = run_experiment(
            &spec,
            &RunOptions {
                workers: 2,
                cache: None,
            },
        )
        .unwrap();
        assert_eq!(full.rows.len(), 6);
        assert_eq!(full.heatmap.len(), 3 * 6);
        assert_eq!(full.rows[0].key, 60.0);
        assert_eq!(full.rows[0].allocator, "tascs");
        assert_eq!(full.rows[5].allocator, "uniform");

        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join(CACHE_FILE);
        // a partial cache: keep only some of the replications, then resume
        run_experiment(
            &spec,
            &RunOptions {
                workers: 1,
                cache: Some(cache.clone()),
            },
        )
        .unwrap();
        let lines: Vec<String> = fs::read_to_string(&cache)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        assert_eq!(lines.len(), 18);
        fs::write(&cache, lines[..7].join("\n") + "\n{\"torn").unwrap();
        let resumed = run_experiment(
            &spec,
            &RunOptions {
                workers: 3,
                cache: Some(cache),
            },
        )
        .unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn campaign_directory_layout_and_round_trip() {
        let text = r#"{"name":"d","kind":"delta_sweep","instance":"example2","replications":4,"deltas":[0.2,0.05],"heatmap":true,"seed":1}"#;
        let spec = ExperimentSpec::from_json_str(text).unwrap();
        let root = tempfile::tempdir().unwrap();
        let (dir, out) = run_campaign(&spec, root.path(), 2).unwrap();
        for f in [
            "table.csv",
            "table.json",
            "manifest.json",
            "heatmap.csv",
            CACHE_FILE,
        ] {
            assert!(dir.join(f).exists(), "{f}");
        }
        assert_eq!(read_table_csv(dir.join("table.csv")).unwrap(), out.rows);
        let json: Vec<AggregateRow> =
            serde_json::from_str(&fs::read_to_string(dir.join("table.json")).unwrap()).unwrap();
        assert_eq!(json, out.rows);
        assert_eq!(resume_campaign(&dir, 1).unwrap(), out);
        assert!(out.rows.iter().all(|r| r.ratio_tau_over_log.is_some()));
    }

    #[test]
    fn failures_are_counted_not_fatal() {
        let mut spec = ExperimentSpec::from_json_str(
            r#"{"name":"f","kind":"single_run","instance":"example2","replications":3}"#,
        )
        .unwrap();
        // a round cap below the forced initial samples fails every replication
        spec.engine.t_max = 10;
        let out = run_experiment(&spec, &RunOptions::default()).unwrap();
        assert_eq!(out.failures, 3);
        assert_eq!(out.rows[0].n, 0);
        assert_eq!(out.rows[0].failures, 3);
    }
}
