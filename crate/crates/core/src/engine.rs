//! Sequential sampling: track-and-stop with subpopulation constraints, plus
//! the policy-level and uniform baselines used in fixed-budget comparisons.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cells::CellMatrix;
use crate::counterset::{f_star, glr_statistic, infeasible_shortcut_weights};
use crate::env::{replication_stream, Environment, Stream};
use crate::error::{Error, Result};
use crate::expfamily::FamilySpec;
use crate::instance::{best_policy_of, FairnessSpec, Instance};
use crate::solvers::{project_eps_simplex, project_simplex, EpsProjection};

/// Clipping level `(K^2 L^2 + t)^(-1/2) / 2` for the tracked weights.
pub fn epsilon_t(k: usize, l: usize, t: u64) -> f64 {
    let kl = (k * l) as f64;
    0.5 / (kl * kl + t as f64).sqrt()
}

/// Stylized GLR threshold `ln((1 + ln t) / delta)`.
pub fn stopping_threshold(t: u64, delta: f64) -> f64 {
    ((1.0 + (t.max(1) as f64).ln()) / delta).ln()
}

/// Cell with the largest tracking deficit; ties go to the first in row-major order.
pub fn select_cell(deficits: &CellMatrix) -> (usize, usize) {
    deficits.argmax()
}

/// In-loop step size as a function of the run's cumulative ascent step `n`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// `alpha` at every step.
    Constant,
    /// `alpha / sqrt(n)`.
    InvSqrt,
    /// `alpha / (sqrt(n) |c|)`: each step moves `alpha / sqrt(n)` before projection.
    #[default]
    Normalized,
}

impl StepSchedule {
    pub fn step(self, alpha: f64, n: u64, grad_norm: f64) -> f64 {
        let root = (n.max(1) as f64).sqrt();
        match self {
            StepSchedule::Constant => alpha,
            StepSchedule::InvSqrt => alpha / root,
            StepSchedule::Normalized if grad_norm > 0.0 => alpha / (root * grad_norm),
            StepSchedule::Normalized => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub delta: f64,
    /// Forced samples per cell before tracking starts.
    pub n0: u64,
    /// Subgradient steps per weight update.
    pub ascent_steps: usize,
    pub alpha: f64,
    pub schedule: StepSchedule,
    /// Selections drawn per weight update.
    pub batch: usize,
    pub t_max: u64,
    pub seed: u64,
    /// Replication index; selects the random stream under `seed`.
    pub stream: u64,
    /// Family used for estimation when it differs from the data.
    pub model_family: Option<FamilySpec>,
    pub eps_rule: EpsProjection,
    /// Fixed-budget mode: sample exactly this many times and skip the GLR stop.
    pub budget: Option<u64>,
    /// Sample counts at which the current recommendation is recorded.
    pub checkpoints: Vec<u64>,
    pub record_trajectory: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            delta: 0.1,
            n0: 5,
            ascent_steps: 1,
            alpha: 1.0,
            schedule: StepSchedule::Normalized,
            batch: 1,
            t_max: 10_000_000,
            seed: 0,
            stream: 0,
            model_family: None,
            eps_rule: EpsProjection::default(),
            budget: None,
            checkpoints: Vec::new(),
            record_trajectory: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self, k: usize, l: usize) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        if self.n0 < 1 {
            return Err(Error::Config("n0 must be at least 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        let init = self.n0 * (k * l) as u64;
        if self.t_max <= init {
            return Err(Error::Config(format!(
                "t_max {} must exceed the {init} initial samples",
                self.t_max
            )));
        }
        if let Some(b) = self.budget {
            if b < init {
                return Err(Error::Config(format!(
                    "budget {b} is below the {init} initial samples"
                )));
            }
        }
        if self.checkpoints.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(
                "checkpoints must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Evolving state of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub t: u64,
    pub counts: CellMatrix,
    pub sums: CellMatrix,
    /// Raw empirical means (the estimate instance clips them per family).
    pub means: CellMatrix,
    /// Cumulative tracked weights minus counts.
    pub deficits: CellMatrix,
    pub w_current: CellMatrix,
}

impl RunState {
    fn new(k: usize, l: usize) -> Self {
        Self {
            t: 0,
            counts: CellMatrix::zeros(k, l),
            sums: CellMatrix::zeros(k, l),
            means: CellMatrix::zeros(k, l),
            deficits: CellMatrix::zeros(k, l),
            w_current: CellMatrix::filled(k, l, 1.0 / (k * l) as f64),
        }
    }

    fn record(&mut self, k: usize, l: usize, x: f64) {
        self.t += 1;
        self.counts.add(k, l, 1.0);
        self.sums.add(k, l, x);
        self.means
            .set(k, l, self.sums.get(k, l) / self.counts.get(k, l));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t: u64,
    pub recommendation: Option<usize>,
    pub correct: Option<bool>,
}

/// Worst observed slack of the two C-tracking guarantees over a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    /// `min_t [min N(t) - (sqrt(t + K^2 L^2) - 2KL)]`; nonnegative when the floor holds.
    pub min_count_margin: f64,
    /// `max_t [max |deficit(t)| - KL (1 + sqrt t)]`; nonpositive when tracking holds.
    pub max_deficit_excess: f64,
    pub rounds_checked: u64,
}

impl TrackingReport {
    fn new() -> Self {
        Self {
            min_count_margin: f64::INFINITY,
            max_deficit_excess: f64::NEG_INFINITY,
            rounds_checked: 0,
        }
    }

    fn observe(&mut self, state: &RunState) {
        let (k, l) = (state.counts.rows(), state.counts.cols());
        let kl = (k * l) as f64;
        let t = state.t as f64;
        let min_n = state
            .counts
            .as_slice()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let max_s = state
            .deficits
            .as_slice()
            .iter()
            .fold(0.0f64, |m, s| m.max(s.abs()));
        self.min_count_margin = self
            .min_count_margin
            .min(min_n - ((t + kl * kl).sqrt() - 2.0 * kl));
        self.max_deficit_excess = self.max_deficit_excess.max(max_s - kl * (1.0 + t.sqrt()));
        self.rounds_checked += 1;
    }

    pub fn holds(&self) -> bool {
        self.min_count_margin >= 0.0 && self.max_deficit_excess <= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: u64,
    pub k: usize,
    pub l: usize,
    pub outcome: f64,
    /// Last computed GLR statistic (absent before the first evaluation).
    pub z: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Samples drawn when the run ended.
    pub tau: u64,
    /// The GLR statistic crossed the threshold.
    pub stopped: bool,
    pub timed_out: bool,
    /// Reason the run was cut short by its environment, if it was.
    pub aborted: Option<String>,
    pub recommendation: Option<usize>,
    pub correct: Option<bool>,
    pub final_counts: CellMatrix,
    pub final_z: Option<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub tracking: TrackingReport,
    pub trajectory: Option<Vec<TrajectoryRow>>,
}

impl RunResult {
    /// External label: 0 for "nothing feasible", otherwise the 1-based policy.
    pub fn label(&self) -> usize {
        crate::instance::policy_label(self.recommendation)
    }

    /// Write the trajectory as CSV with columns `t,k,l,outcome,Z,threshold`.
    pub fn write_trajectory_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "k", "l", "outcome", "Z", "threshold"])?;
        for r in self.trajectory.iter().flatten() {
            w.write_record([
                r.t.to_string(),
                r.k.to_string(),
                r.l.to_string(),
                r.outcome.to_string(),
                r.z.map(|z| z.to_string()).unwrap_or_default(),
                r.threshold.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Shared bookkeeping for the three allocators.
struct Runner<'a> {
    truth: &'a Instance,
    model: Instance,
    env: &'a Environment,
    config: &'a EngineConfig,
    rng: Stream,
    state: RunState,
    tracking: TrackingReport,
    checkpoints: Vec<Checkpoint>,
    next_checkpoint: usize,
    trajectory: Option<Vec<TrajectoryRow>>,
    last_z: Option<f64>,
}

impl<'a> Runner<'a> {
    fn new(truth: &'a Instance, env: &'a Environment, config: &'a EngineConfig) -> Result<Self> {
        let (k, l) = (truth.num_policies(), truth.num_subpops());
        if env.num_policies() != k || env.num_subpops() != l {
            return Err(Error::invalid(format!(
                "environment is {}x{}, instance is {k}x{l}",
                env.num_policies(),
                env.num_subpops()
            )));
        }
        config.validate(k, l)?;
        let model = match config.model_family {
            Some(f) => truth.with_family(f)?,
            None => truth.clone(),
        };
        Ok(Self {
            truth,
            model,
            env,
            config,
            rng: replication_stream(config.seed, config.stream),
            state: RunState::new(k, l),
            tracking: TrackingReport::new(),
            checkpoints: Vec::with_capacity(config.checkpoints.len()),
            next_checkpoint: 0,
            trajectory: config.record_trajectory.then(Vec::new),
            last_z: None,
        })
    }

    fn recommend(&self) -> Option<usize> {
        best_policy_of(&self.state.means, self.truth.q(), self.truth.fairness())
    }

    fn correct(&self, rec: Option<usize>) -> Option<bool> {
        Some(rec == self.truth.best_policy())
    }

    fn estimate(&self) -> Instance {
        self.model.with_means_unchecked(self.state.means.clone())
    }

    fn sample(&mut self, k: usize, l: usize) -> Result<()> {
        let x = self.env.draw(k, l, &mut self.rng)?;
        self.state.record(k, l, x);
        if let Some(tr) = self.trajectory.as_mut() {
            tr.push(TrajectoryRow {
                t: self.state.t,
                k,
                l,
                outcome: x,
                z: self.last_z,
                threshold: stopping_threshold(self.state.t, self.config.delta),
            });
        }
        while self.next_checkpoint < self.config.checkpoints.len()
            && self.config.checkpoints[self.next_checkpoint] <= self.state.t
        {
            let rec = self.recommend();
            self.checkpoints.push(Checkpoint {
                t: self.config.checkpoints[self.next_checkpoint],
                recommendation: rec,
                correct: self.correct(rec),
            });
            self.next_checkpoint += 1;
        }
        Ok(())
    }

    /// `n0` samples per cell; the deficits start at `w0 - N0` with `w0` uniform.
    fn initialize(&mut self) -> Result<()> {
        let (k, l) = (self.truth.num_policies(), self.truth.num_subpops());
        for _ in 0..self.config.n0 {
            for i in 0..k {
                for j in 0..l {
                    self.sample(i, j)?;
                }
            }
        }
        let w0 = 1.0 / (k * l) as f64;
        self.state.deficits = self.state.counts.map(|n| w0 - n);
        self.tracking.observe(&self.state);
        Ok(())
    }

    fn budget_left(&self) -> bool {
        match self.config.budget {
            Some(b) => self.state.t < b,
            None => self.state.t < self.config.t_max,
        }
    }

    fn glr(&mut self) -> Result<f64> {
        let z = glr_statistic(&self.estimate(), &self.state.counts)?;
        self.last_z = Some(z);
        Ok(z)
    }

    fn finish(mut self, stopped: bool, aborted: Option<String>) -> RunResult {
        let rec = self.recommend();
        let final_z = if self.config.budget.is_some() && self.last_z.is_none() {
            glr_statistic(&self.estimate(), &self.state.counts).ok()
        } else {
            self.last_z
        };
        let timed_out = !stopped && aborted.is_none() && self.config.budget.is_none();
        RunResult {
            tau: self.state.t,
            stopped,
            timed_out,
            aborted,
            recommendation: rec,
            correct: self.correct(rec),
            final_counts: std::mem::replace(&mut self.state.counts, CellMatrix::zeros(0, 0)),
            final_z,
            checkpoints: self.checkpoints,
            tracking: self.tracking,
            trajectory: self.trajectory,
        }
    }
}

fn environment_abort(e: Error) -> Result<Option<String>> {
    match e {
        Error::EnvironmentExhausted(_) => Ok(Some(e.to_string())),
        other => Err(other),
    }
}

/// Weights for the next batch: the closed form when nothing looks feasible,
/// otherwise a few projected subgradient steps from the previous weights.
fn update_weights(
    estimate: &Instance,
    w: &CellMatrix,
    config: &EngineConfig,
    counter: &mut u64,
) -> Result<CellMatrix> {
    if matches!(estimate.fairness(), FairnessSpec::HardThreshold { .. })
        && estimate.best_policy().is_none()
    {
        if let Ok(w) = infeasible_shortcut_weights(estimate) {
            return Ok(w);
        }
    }
    let (k, l) = (w.rows(), w.cols());
    let mut w = w.clone();
    for _ in 0..config.ascent_steps {
        let eval = f_star(estimate, &w)?;
        if eval.subgrad.as_slice().iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteSubgradient(*counter as usize));
        }
        *counter += 1;
        let alpha = config.schedule.step(
            config.alpha,
            *counter,
            eval.subgrad.dot(&eval.subgrad).sqrt(),
        );
        let moved: Vec<f64> = w
            .as_slice()
            .iter()
            .zip(eval.subgrad.as_slice())
            .map(|(x, c)| x + alpha * c)
            .collect();
        w = CellMatrix::from_row_major(k, l, project_simplex(&moved));
    }
    Ok(w)
}

/// Track-and-stop over policy-subpopulation cells with GLR stopping.
///
/// `truth` supplies `q`, the fairness rule, the default model family and the
/// correct answer used for `correct`; samples come from `env`.
pub fn run_tascs(truth: &Instance, env: &Environment, config: &EngineConfig) -> Result<RunResult> {
    let mut run = Runner::new(truth, env, config)?;
    let (k, l) = (truth.num_policies(), truth.num_subpops());
    if let Err(e) = run.initialize() {
        let reason = environment_abort(e)?;
        return Ok(run.finish(false, reason));
    }
    let fixed = config.budget.is_some();
    let mut ascent_count = 0u64;
    if !fixed && run.glr()? > stopping_threshold(run.state.t, config.delta) {
        return Ok(run.finish(true, None));
    }
    while run.budget_left() {
        let estimate = run.estimate();
        run.state.w_current =
            update_weights(&estimate, &run.state.w_current, config, &mut ascent_count)?;
        for _ in 0..config.batch {
            if !run.budget_left() {
                break;
            }
            let eps = epsilon_t(k, l, run.state.t);
            let tracked =
                project_eps_simplex(run.state.w_current.as_slice(), eps, config.eps_rule)?;
            for (d, w) in run.state.deficits.as_mut_slice().iter_mut().zip(&tracked) {
                *d += w;
            }
            let (i, j) = select_cell(&run.state.deficits);
            run.state.deficits.add(i, j, -1.0);
            if let Err(e) = run.sample(i, j) {
                let reason = environment_abort(e)?;
                return Ok(run.finish(false, reason));
            }
            run.tracking.observe(&run.state);
        }
        if !fixed && run.glr()? > stopping_threshold(run.state.t, config.delta) {
            return Ok(run.finish(true, None));
        }
    }
    Ok(run.finish(false, None))
}

/// Unconstrained Gaussian best-arm objective over policies:
/// `min_{k != b} (w_b w_k / (w_b + w_k)) gap_k^2 / 2` and a subgradient.
fn policy_level_objective(means: &[f64], w: &[f64]) -> (f64, Vec<f64>) {
    let b = crate::instance::argmax_first(means);
    let mut best = (f64::INFINITY, 0usize);
    for k in (0..means.len()).filter(|&k| k != b) {
        let gap = means[b] - means[k];
        let s = w[b] + w[k];
        let v = if s > 0.0 {
            w[b] * w[k] / s * gap * gap / 2.0
        } else {
            0.0
        };
        if v < best.0 {
            best = (v, k);
        }
    }
    let mut g = vec![0.0; means.len()];
    let k = best.1;
    let gap = means[b] - means[k];
    let s = (w[b] + w[k]).max(1e-300);
    g[b] = (w[k] / s).powi(2) * gap * gap / 2.0;
    g[k] = (w[b] / s).powi(2) * gap * gap / 2.0;
    (best.0, g)
}

/// Policy-level track-and-stop in fixed-budget mode: weights come from the
/// gaps between q-weighted means only, and the subpopulation of each sample
/// is drawn uniformly.
pub fn run_tas_baseline(
    truth: &Instance,
    env: &Environment,
    config: &EngineConfig,
) -> Result<RunResult> {
    let mut run = Runner::new(truth, env, config)?;
    let (k, l) = (truth.num_policies(), truth.num_subpops());
    if let Err(e) = run.initialize() {
        let reason = environment_abort(e)?;
        return Ok(run.finish(false, reason));
    }
    let q = truth.q().to_vec();
    let mut v = vec![1.0 / k as f64; k];
    let mut ascent_count = 0u64;
    let mut policy_deficit: Vec<f64> = (0..k)
        .map(|i| 1.0 / k as f64 - run.state.counts.row(i).iter().sum::<f64>())
        .collect();
    while run.budget_left() {
        let agg: Vec<f64> = (0..k)
            .map(|i| {
                q.iter()
                    .zip(run.state.means.row(i))
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        for _ in 0..config.ascent_steps {
            let (_, g) = policy_level_objective(&agg, &v);
            ascent_count += 1;
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let alpha = config.schedule.step(config.alpha, ascent_count, norm);
            let moved: Vec<f64> = v.iter().zip(&g).map(|(x, c)| x + alpha * c).collect();
            v = project_simplex(&moved);
        }
        for _ in 0..config.batch {
            if !run.budget_left() {
                break;
            }
            let eps = epsilon_t(k, 1, run.state.t);
            let tracked = project_eps_simplex(&v, eps, config.eps_rule)?;
            for (d, w) in policy_deficit.iter_mut().zip(&tracked) {
                *d += w;
            }
            let i = crate::instance::argmax_first(&policy_deficit);
            policy_deficit[i] -= 1.0;
            let j = run.rng.random_range(0..l);
            if let Err(e) = run.sample(i, j) {
                let reason = environment_abort(e)?;
                return Ok(run.finish(false, reason));
            }
        }
    }
    Ok(run.finish(false, None))
}

/// Round-robin over cells after the forced initial samples.
pub fn run_uniform_baseline(
    truth: &Instance,
    env: &Environment,
    config: &EngineConfig,
) -> Result<RunResult> {
    let mut run = Runner::new(truth, env, config)?;
    let (k, l) = (truth.num_policies(), truth.num_subpops());
    if let Err(e) = run.initialize() {
        let reason = environment_abort(e)?;
        return Ok(run.finish(false, reason));
    }
    let mut cursor = 0usize;
    while run.budget_left() {
        let (i, j) = (cursor / l, cursor % l);
        cursor = (cursor + 1) % (k * l);
        if let Err(e) = run.sample(i, j) {
            let reason = environment_abort(e)?;
            return Ok(run.finish(false, reason));
        }
    }
    Ok(run.finish(false, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;

    fn toy() -> Instance {
        Instance::new(
            CellMatrix::from_rows(&[vec![1.0], vec![-1.0]]),
            vec![1.0],
            FamilySpec::gaussian(1.0).unwrap(),
            FairnessSpec::HardThreshold { c_min: 0.0 },
        )
        .unwrap()
    }

    #[test]
    fn epsilon_and_threshold_values() {
        assert_abs_diff_eq!(epsilon_t(5, 3, 0), 1.0 / 30.0, epsilon = 1e-15);
        assert!(epsilon_t(5, 3, 250_000) <= 1e-3);
        assert_abs_diff_eq!(stopping_threshold(1, 0.1), 10f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            stopping_threshold(60, 0.1),
            ((1.0 + 60f64.ln()) / 0.1).ln(),
            epsilon = 1e-12
        );
        assert!((stopping_threshold(60, 0.1) - 3.931).abs() < 1e-3);
        let mut prev = 0.0;
        for t in 1..1000 {
            let b = stopping_threshold(t, 0.1);
            assert!(b >= prev);
            assert!(stopping_threshold(t, 0.05) > b);
            prev = b;
        }
    }

    #[test]
    fn select_cell_argmax_and_ties() {
        let mut d = CellMatrix::zeros(3, 2);
        d.set(1, 0, 0.7);
        assert_eq!(select_cell(&d), (1, 0));
        assert_eq!(select_cell(&CellMatrix::filled(3, 2, 0.2)), (0, 0));
    }

    #[test]
    fn step_schedules() {
        assert_eq!(StepSchedule::Constant.step(0.5, 9, 2.0), 0.5);
        assert_abs_diff_eq!(
            StepSchedule::InvSqrt.step(0.6, 9, 2.0),
            0.2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            StepSchedule::Normalized.step(0.6, 9, 2.0),
            0.1,
            epsilon = 1e-15
        );
        assert_eq!(StepSchedule::Normalized.step(0.6, 9, 0.0), 0.0);
    }

    #[test]
    fn config_validation() {
        let c = EngineConfig::default();
        assert!(c.validate(2, 2).is_ok());
        assert!(EngineConfig {
            delta: 1.0,
            ..c.clone()
        }
        .validate(2, 2)
        .is_err());
        assert!(EngineConfig { n0: 0, ..c.clone() }.validate(2, 2).is_err());
        assert!(EngineConfig {
            batch: 0,
            ..c.clone()
        }
        .validate(2, 2)
        .is_err());
        assert!(EngineConfig {
            t_max: 20,
            ..c.clone()
        }
        .validate(2, 2)
        .is_err());
        assert!(EngineConfig {
            checkpoints: vec![5, 5],
            ..c.clone()
        }
        .validate(2, 2)
        .is_err());
    }

    #[test]
    fn same_seed_same_run() {
        let inst = fixtures::asymptotic_scaling();
        let env = Environment::parametric(&inst);
        let cfg = EngineConfig {
            delta: 0.2,
            seed: 9,
            stream: 3,
            record_trajectory: true,
            ..EngineConfig::default()
        };
        let a = run_tascs(&inst, &env, &cfg).unwrap();
        let b = run_tascs(&inst, &env, &cfg).unwrap();
        assert_eq!(a, b);
        let c = run_tascs(&inst, &env, &EngineConfig { stream: 4, ..cfg }).unwrap();
        assert_ne!(a.trajectory, c.trajectory);
    }

    #[test]
    fn state_bookkeeping() {
        let inst = fixtures::example2(0.5);
        let env = Environment::parametric(&inst);
        let cfg = EngineConfig {
            delta: 0.01,
            budget: Some(400),
            record_trajectory: true,
            ..EngineConfig::default()
        };
        let r = run_tascs(&inst, &env, &cfg).unwrap();
        assert_eq!(r.tau, 400);
        assert_abs_diff_eq!(r.final_counts.sum(), 400.0);
        let tr = r.trajectory.as_ref().unwrap();
        assert_eq!(tr.len(), 400);
        // counts reconstructed from the trajectory
        let mut counts = CellMatrix::zeros(3, 2);
        for row in tr {
            counts.add(row.k, row.l, 1.0);
        }
        assert_eq!(counts, r.final_counts);
        assert!(r.tracking.holds(), "{:?}", r.tracking);
        let mut buf = Vec::new();
        r.write_trajectory_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,k,l,outcome,Z,threshold\n"));
        assert_eq!(text.lines().count(), 401);
    }

    #[test]
    fn deficits_sum_is_conserved() {
        let inst = fixtures::asymptotic_scaling();
        let env = Environment::parametric(&inst);
        let cfg = EngineConfig {
            delta: 0.2,
            budget: Some(300),
            ..EngineConfig::default()
        };
        let mut run = Runner::new(&inst, &env, &cfg).unwrap();
        run.initialize().unwrap();
        let start = run.state.deficits.sum();
        assert_abs_diff_eq!(start, 1.0 - 75.0, epsilon = 1e-12);
        for _ in 0..100 {
            let eps = epsilon_t(5, 3, run.state.t);
            let tracked =
                project_eps_simplex(run.state.w_current.as_slice(), eps, cfg.eps_rule).unwrap();
            for (d, w) in run.state.deficits.as_mut_slice().iter_mut().zip(&tracked) {
                *d += w;
            }
            let (i, j) = select_cell(&run.state.deficits);
            run.state.deficits.add(i, j, -1.0);
            run.sample(i, j).unwrap();
        }
        assert_abs_diff_eq!(run.state.deficits.sum(), start, epsilon = 1e-9);
    }

    #[test]
    fn glr_matches_recomputation() {
        let inst = fixtures::asymptotic_scaling();
        let env = Environment::parametric(&inst);
        let cfg = EngineConfig {
            delta: 0.2,
            seed: 1,
            ..EngineConfig::default()
        };
        let r = run_tascs(&inst, &env, &cfg).unwrap();
        assert!(r.stopped);
        assert!(r.final_z.unwrap() > stopping_threshold(r.tau, 0.2));
        // homogeneity: doubling the counts doubles Z
        let est = inst.with_means(inst.means().clone()).unwrap();
        let z1 = glr_statistic(&est, &r.final_counts).unwrap();
        let z2 = glr_statistic(&est, &r.final_counts.map(|n| 2.0 * n)).unwrap();
        assert_abs_diff_eq!(z2, 2.0 * z1, epsilon = 1e-9 * z2.max(1.0));
    }

    #[test]
    fn dominant_toy_is_reliable() {
        let inst = toy();
        let env = Environment::parametric(&inst);
        let mut right = 0;
        for s in 0..200 {
            let cfg = EngineConfig {
                delta: 0.1,
                seed: 77,
                stream: s,
                ..EngineConfig::default()
            };
            let r = run_tascs(&inst, &env, &cfg).unwrap();
            assert!(r.stopped);
            if r.label() == 1 {
                right += 1;
            }
        }
        assert!(right >= 195, "{right}/200");
    }

    #[test]
    fn uniform_round_robin_counts() {
        let inst = fixtures::example2(0.5);
        let env = Environment::parametric(&inst);
        let cfg = EngineConfig {
            budget: Some(30 + 6 * 7),
            ..EngineConfig::default()
        };
        let r = run_uniform_baseline(&inst, &env, &cfg).unwrap();
        assert!(r.final_counts.as_slice().iter().all(|&n| n == 12.0));
        assert_eq!(r, run_uniform_baseline(&inst, &env, &cfg).unwrap());
    }

    #[test]
    fn policy_level_weights_split_symmetric_arms() {
        let means = [0.5, -0.5];
        let mut v = vec![0.9, 0.1];
        for n in 1..20_000 {
            let (_, g) = policy_level_objective(&means, &v);
            let a = 1.0 / (n as f64).sqrt();
            v = project_simplex(&[v[0] + a * g[0], v[1] + a * g[1]]);
        }
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-2);
        let inst = fixtures::example2(0.5);
        let env = Environment::parametric(&inst);
        let cfg = EngineConfig {
            budget: Some(200),
            seed: 5,
            ..EngineConfig::default()
        };
        let a = run_tas_baseline(&inst, &env, &cfg).unwrap();
        assert_eq!(a, run_tas_baseline(&inst, &env, &cfg).unwrap());
        assert_eq!(a.tau, 200);
    }

    #[test]
    fn checkpoints_are_recorded() {
        let inst = fixtures::example2(0.5);
        let env = Environment::parametric(&inst);
        let cfg = EngineConfig {
            budget: Some(300),
            checkpoints: vec![100, 200, 300],
            ..EngineConfig::default()
        };
        for run in [run_tascs, run_tas_baseline, run_uniform_baseline] {
            let r = run(&inst, &env, &cfg).unwrap();
            let ts: Vec<u64> = r.checkpoints.iter().map(|c| c.t).collect();
            assert_eq!(ts, vec![100, 200, 300]);
            assert_eq!(r.checkpoints[2].recommendation, r.recommendation);
        }
    }

    #[test]
    fn misspecified_model_runs() {
        let inst = fixtures::misspec(20).unwrap();
        let env = Environment::parametric(&inst);
        let cfg = EngineConfig {
            budget: Some(20 * 3 * 40),
            batch: 10,
            ascent_steps: 3,
            model_family: Some(FamilySpec::gaussian(1.0).unwrap()),
            ..EngineConfig::default()
        };
        let r = run_tascs(&inst, &env, &cfg).unwrap();
        assert_eq!(r.tau, 2400);
        assert!(r.tracking.holds());
    }

    #[test]
    fn bootstrap_exhaustion_is_not_possible_with_replacement() {
        let env = Environment::bootstrap(2, 1, vec![vec![1.0], vec![0.0]]).unwrap();
        let inst = Instance::new(
            CellMatrix::from_rows(&[vec![1.0 - 1e-3], vec![1e-3]]),
            vec![1.0],
            FamilySpec::bernoulli(),
            FairnessSpec::HardThreshold { c_min: 0.5 },
        )
        .unwrap();
        let r = run_tascs(&inst, &env, &EngineConfig::default()).unwrap();
        assert!(r.aborted.is_none());
        assert_eq!(r.recommendation, Some(0));
    }
}
