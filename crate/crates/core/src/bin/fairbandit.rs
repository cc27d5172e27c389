use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairbandit::harness::{
    resolve_instance, resume_campaign, run_campaign, AggregateRow, Allocator, EnvironmentSource,
    ExperimentKind, ExperimentOutput, ExperimentSpec,
};
use fairbandit::weights::{solve_oracle, OracleConfig};
use fairbandit::{Error, FamilySpec, Result};

#[derive(Parser, Debug)]
#[command(
    name = "fairbandit",
    version,
    about = "Best-policy selection under subpopulation fairness constraints"
)]
struct Cli {
    /// Master seed for every replication stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "FAIRBANDIT_WORKERS", default_value_t = 0)]
    workers: usize,
    /// Root directory for campaign outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replications per row, overriding the manifest.
    #[arg(long, global = true)]
    reps: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Optimal sampling proportions and T* of an instance.
    Tstar {
        /// Bundled instance name or instance JSON file.
        #[arg(long)]
        instance: String,
        /// Uniform penalties to sweep instead of the hard threshold.
        #[arg(long, value_delimiter = ',')]
        gamma_sweep: Vec<f64>,
        #[arg(long)]
        iters: Option<usize>,
        /// Lower bound on every weight during the search.
        #[arg(long, default_value_t = 0.0)]
        eps_floor: f64,
    },
    /// Run a bundled manifest by name or a manifest file.
    Run {
        manifest: Option<String>,
        /// Use the full-scale replication count.
        #[arg(long)]
        paper: bool,
        /// Finish an interrupted campaign from its output directory.
        #[arg(long, conflicts_with = "manifest")]
        resume: Option<PathBuf>,
    },
    /// Stopping time across confidence levels.
    SweepDelta {
        #[arg(long, default_value = "asymptotic_5x3")]
        instance: String,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.05,0.01")]
        deltas: Vec<f64>,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// T* and stopping time under uniform penalties.
    SweepGamma {
        #[arg(long, default_value = "extension_10x3")]
        instance: String,
        #[arg(long, value_delimiter = ',', default_value = "0.5,1,5,10")]
        gammas: Vec<f64>,
        /// Compute T* only.
        #[arg(long)]
        tstar_only: bool,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// T* and stopping time as one cell's feasibility gap varies.
    SweepEps {
        #[arg(long, default_value = "asymptotic_5x3")]
        instance: String,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.6,0.9,1.2")]
        epsilons: Vec<f64>,
        /// 1-based policy and subpopulation of the varied cell.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [3, 1])]
        cell: Vec<usize>,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Fixed-budget probability of correct selection.
    Pcs {
        #[arg(long, default_value = "misspec_k20")]
        instance: String,
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "tascs,tas")]
        allocators: Vec<Allocator>,
        /// Estimate with a Gaussian model of this standard deviation.
        #[arg(long)]
        gaussian_model: Option<f64>,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Fixed-budget study on the bundled IST cell summary.
    Ist {
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "3000,3750,4500,5250,6000"
        )]
        checkpoints: Vec<u64>,
    },
}

#[derive(Args, Debug)]
struct EngineArgs {
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    ascent_steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n0: Option<u64>,
    #[arg(long)]
    t_max: Option<u64>,
    #[arg(long)]
    heatmap: bool,
}

fn base_spec(name: &str, kind: ExperimentKind, instance: &str) -> ExperimentSpec {
    ExperimentSpec {
        name: name.to_string(),
        kind,
        instance: instance.to_string(),
        environment: EnvironmentSource::Parametric,
        engine: Default::default(),
        oracle: Default::default(),
        replications: 200,
        paper_replications: None,
        deltas: vec![],
        gammas: vec![],
        epsilons: vec![],
        checkpoints: vec![],
        allocators: vec![Allocator::Tascs],
        sensitivity_cell: None,
        tstar: false,
        heatmap: false,
        workers: None,
        seed: 0,
    }
}

impl EngineArgs {
    fn apply(&self, spec: &mut ExperimentSpec) {
        let e = &mut spec.engine;
        if let Some(v) = self.delta {
            e.delta = v;
        }
        if let Some(v) = self.batch {
            e.batch = v;
        }
        if let Some(v) = self.ascent_steps {
            e.ascent_steps = v;
        }
        if let Some(v) = self.alpha {
            e.alpha = v;
        }
        if let Some(v) = self.n0 {
            e.n0 = v;
        }
        if let Some(v) = self.t_max {
            e.t_max = v;
        }
        spec.heatmap |= self.heatmap;
    }
}

fn print_table(rows: &[AggregateRow]) {
    println!(
        "{:>10} {:>8} {:>6} {:>10} {:>8} {:>8} {:>14} {:>10} {:>10} {:>6}",
        "key", "alloc", "n", "mean_tau", "se", "pcs", "pcs_ci", "ratio", "T*", "best"
    );
    let f = |x: Option<f64>, p: usize| x.map(|v| format!("{v:.p$}")).unwrap_or_else(|| "-".into());
    for r in rows {
        let ci = match (r.pcs_ci_low, r.pcs_ci_high) {
            (Some(a), Some(b)) => format!("[{a:.3},{b:.3}]"),
            _ => "-".into(),
        };
        println!(
            "{:>10} {:>8} {:>6} {:>10} {:>8} {:>8} {:>14} {:>10} {:>10} {:>6}",
            format!("{}", r.key),
            r.allocator,
            r.n,
            f(r.mean_tau, 1),
            f(r.se_tau, 2),
            f(r.pcs, 4),
            ci,
            f(r.ratio_tau_over_log, 2),
            f(r.t_star, 2),
            r.best_policy
                .map(|b| b.to_string())
                .unwrap_or_else(|| "-".into()),
        );
    }
}

fn finish(out: &ExperimentOutput) -> ExitCode {
    print_table(&out.rows);
    if out.failures > 0 {
        eprintln!("{} replication(s) failed", out.failures);
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn campaign(cli: &Cli, mut spec: ExperimentSpec) -> Result<ExitCode> {
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(r) = cli.reps {
        spec.replications = r;
    }
    let (dir, out) = run_campaign(&spec, &cli.out, cli.workers)?;
    eprintln!("wrote {}", dir.display());
    Ok(finish(&out))
}

fn tstar(
    instance: &str,
    gammas: Vec<f64>,
    iters: Option<usize>,
    eps_floor: f64,
    cli: &Cli,
) -> Result<ExitCode> {
    let mut oracle = OracleConfig {
        eps_floor,
        ..OracleConfig::default()
    };
    if let Some(n) = iters {
        oracle.max_iters = n;
    }
    if gammas.is_empty() {
        let inst = resolve_instance(instance)?;
        let sol = solve_oracle(&inst, &oracle)?;
        println!(
            "T* = {:.6}  (f* = {:.6e}, {} iterations)",
            sol.t_star, sol.f_star, sol.iterations
        );
        println!("w*:");
        for k in 0..sol.w_star.rows() {
            let row: Vec<String> = sol
                .w_star
                .row(k)
                .iter()
                .map(|w| format!("{w:.5}"))
                .collect();
            println!("  policy {:>3}: {}", k + 1, row.join("  "));
        }
    }
    let mut spec = base_spec("tstar", ExperimentKind::TstarOnly, instance);
    spec.gammas = gammas;
    spec.oracle = oracle;
    campaign(cli, spec)
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Tstar {
            instance,
            gamma_sweep,
            iters,
            eps_floor,
        } => tstar(instance, gamma_sweep.clone(), *iters, *eps_floor, cli),
        Command::Run {
            manifest,
            paper,
            resume,
        } => {
            if let Some(dir) = resume {
                let out = resume_campaign(dir, cli.workers)?;
                return Ok(finish(&out));
            }
            let name = manifest
                .as_deref()
                .ok_or_else(|| Error::Config("a manifest or --resume is required".into()))?;
            let mut spec = ExperimentSpec::resolve(name)?;
            if *paper {
                spec.replications = spec.paper_replications.unwrap_or(spec.replications);
            }
            campaign(cli, spec)
        }
        Command::SweepDelta {
            instance,
            deltas,
            engine,
        } => {
            let mut spec = base_spec("sweep_delta", ExperimentKind::DeltaSweep, instance);
            spec.deltas = deltas.clone();
            spec.tstar = true;
            engine.apply(&mut spec);
            campaign(cli, spec)
        }
        Command::SweepGamma {
            instance,
            gammas,
            tstar_only,
            engine,
        } => {
            let kind = if *tstar_only {
                ExperimentKind::TstarOnly
            } else {
                ExperimentKind::GammaSweep
            };
            let mut spec = base_spec("sweep_gamma", kind, instance);
            spec.gammas = gammas.clone();
            spec.engine.delta = 0.2;
            engine.apply(&mut spec);
            campaign(cli, spec)
        }
        Command::SweepEps {
            instance,
            epsilons,
            cell,
            engine,
        } => {
            let mut spec = base_spec("sweep_eps", ExperimentKind::Sensitivity, instance);
            spec.epsilons = epsilons.clone();
            spec.sensitivity_cell = Some((cell[0], cell[1]));
            spec.engine.delta = 0.01;
            engine.apply(&mut spec);
            campaign(cli, spec)
        }
        Command::Pcs {
            instance,
            checkpoints,
            allocators,
            gaussian_model,
            engine,
        } => {
            let mut spec = base_spec("pcs", ExperimentKind::FixedBudgetPcs, instance);
            spec.checkpoints = checkpoints.clone();
            spec.allocators = allocators.clone();
            spec.replications = 300;
            if let Some(sigma) = gaussian_model {
                spec.engine.model_family = Some(FamilySpec::gaussian(*sigma)?);
            }
            engine.apply(&mut spec);
            campaign(cli, spec)
        }
        Command::Ist { checkpoints } => {
            let mut spec = ExperimentSpec::resolve("ist_pcs")?;
            spec.checkpoints = checkpoints.clone();
            campaign(cli, spec)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
