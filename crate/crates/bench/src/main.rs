//! Command-line driver for the benchmark experiments.
//!
//! Subcommands: `gen-data`, `ope`, `adversarial`, `batch-opt`, `coverage`,
//! `ci-sweep`, `tune-rho`. Exit codes: 0 on success, 2 for input errors,
//! 3 for estimator failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robust_ope::adversarial::adversarial_analysis;
use robust_ope::empirical::build_empirical;
use robust_ope::error::{OpeError, Result};
use robust_ope::robust_eval::{
    confidence_interval, contraction_diagnostics, correction_term, optimistic_value_iteration,
    radius_for_ci, robust_value_iteration, EstimateRecord, IterationOptions, RadiusSchedule,
};
use robust_ope::trajectory::{load_dataset, save_dataset, simulate, Dataset};
use robust_ope_bench::config::{
    default_behavior, load_radii, save_radii, ConfigOverride, ExperimentConfig, PolicySpec,
};
use robust_ope_bench::envs::EnvRef;
use robust_ope_bench::experiments::{
    self, batch_trial, miss_rate, prepare, run_adversarial, run_batch_compare, run_ci_sweep,
    run_coverage, Prepared,
};
use robust_ope_bench::table::{write_csv, write_sidecar};

#[derive(Parser)]
#[command(name = "ope-bench", version, about = "Robust off-policy evaluation benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Environment: mrp, hmp, mrp-perturbed, hmp-perturbed.
    #[arg(long)]
    env: Option<String>,

    /// Behavior policy: uniform, optimal, or qK[:EPS].
    #[arg(long)]
    behavior: Option<String>,

    /// Target policy: uniform, optimal, or qK[:EPS].
    #[arg(long)]
    target: Option<String>,

    /// Softening ε for qK specs given without an explicit :EPS.
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,

    #[arg(long, default_value_t = 0.95)]
    gamma: f64,

    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Episode counts; comma-separated values form a grid.
    #[arg(long, value_delimiter = ',')]
    episodes: Vec<usize>,

    /// Horizons; comma-separated values form a grid.
    #[arg(long, value_delimiter = ',')]
    horizon: Vec<usize>,

    #[arg(long, default_value_t = 1)]
    trials: usize,

    #[arg(long, default_value_t = 7)]
    seed: u64,

    /// Per-state radii as a JSON map {state index: radius}.
    #[arg(long)]
    radii_file: Option<PathBuf>,

    /// Apply the higher-order interval correction (default).
    #[arg(long, conflicts_with = "uncorrected")]
    corrected: bool,

    /// Report the raw [L, U] interval without the correction.
    #[arg(long)]
    uncorrected: bool,

    /// Output path; tables get a JSON sidecar next to them.
    #[arg(long)]
    out: Option<PathBuf>,

    /// JSON config file; present fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate logged trajectories and write the dataset file.
    GenData(CommonArgs),
    /// Robust + optimistic interval estimate on a logged dataset.
    Ope {
        /// Dataset file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fixed-radius adversarial estimates with asymptotic error bars:
    /// a grid experiment on perturbed-environment data, or a single JSON
    /// report when --data is given.
    Adversarial {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Robust versus sample-average batch policy optimization: a grid
    /// experiment, or a single JSON report when --data is given.
    BatchOpt {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Empirical interval coverage over independent trials.
    Coverage(CommonArgs),
    /// Normalized interval bounds across episode and horizon grids.
    CiSweep(CommonArgs),
    /// Tune a uniform adversarial radius for the perturbed environment.
    TuneRho(CommonArgs),
}

fn parse_policy(spec: &str, epsilon: f64) -> Result<PolicySpec> {
    // allow `qK` shorthand, filling ε from --epsilon
    if let Some(k) = spec.strip_prefix('q') {
        if !k.contains(':') {
            if let Ok(k) = k.parse::<usize>() {
                return Ok(PolicySpec::QIteration { k, epsilon });
            }
        }
    }
    spec.parse()
}

impl CommonArgs {
    fn corrected(&self) -> bool {
        !self.uncorrected
    }

    fn build_config(&self, env_hint: Option<EnvRef>) -> Result<ExperimentConfig> {
        let env = match (&self.env, env_hint) {
            (Some(s), _) => s.parse()?,
            (None, Some(e)) => e,
            (None, None) => {
                return Err(OpeError::InvalidInput(
                    "--env is required (mrp or hmp)".into(),
                ))
            }
        };
        let mut cfg = ExperimentConfig::new(env);
        cfg.gamma = self.gamma;
        cfg.alpha = self.alpha;
        cfg.behavior = match &self.behavior {
            Some(s) => parse_policy(s, self.epsilon)?,
            None => default_behavior(env.id),
        };
        if let Some(t) = &self.target {
            cfg.target = parse_policy(t, self.epsilon)?;
        }
        if !self.episodes.is_empty() {
            cfg.episodes_grid = self.episodes.clone();
        }
        if !self.horizon.is_empty() {
            cfg.horizon_grid = self.horizon.clone();
        }
        cfg.trials = self.trials;
        cfg.seed = self.seed;
        cfg.corrected = self.corrected();
        cfg.radii_file = self.radii_file.clone();
        if let Some(path) = &self.config {
            ConfigOverride::load(path)?.apply(&mut cfg)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_path(&self) -> Result<&PathBuf> {
        self.out
            .as_ref()
            .ok_or_else(|| OpeError::InvalidInput("--out is required".into()))
    }
}

fn load_with_env(path: &PathBuf) -> Result<(Dataset, EnvRef)> {
    let ds = load_dataset(path)?;
    let env: EnvRef = ds.meta.env.parse().map_err(|_| {
        OpeError::InvalidInput(format!(
            "dataset env `{}` is not a known benchmark environment",
            ds.meta.env
        ))
    })?;
    Ok((ds, env))
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| OpeError::Internal(format!("json serialization: {e}")))?;
    match out {
        Some(path) => std::fs::write(path, text).map_err(|source| OpeError::Io {
            path: path.display().to_string(),
            source,
        }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn gen_data(args: &CommonArgs) -> Result<()> {
    let cfg = args.build_config(None)?;
    let mdp = cfg.env.build(cfg.gamma)?;
    let behavior = cfg.behavior.build(&EnvRef::base(cfg.env.id).build(cfg.gamma)?)?;
    let (episodes, horizon) = (cfg.episodes_grid[0], cfg.horizon_grid[0]);
    let ds = simulate(
        &mdp,
        &behavior,
        episodes,
        horizon,
        cfg.seed,
        &cfg.env.to_string(),
    )?;
    save_dataset(&ds, args.out_path()?)?;
    eprintln!(
        "wrote {} transitions ({episodes} x {horizon}) to {}",
        ds.n_transitions(),
        args.out_path()?.display()
    );
    Ok(())
}

fn estimate_on_dataset(prep: &Prepared, ds: &Dataset, args: &CommonArgs) -> Result<EstimateRecord> {
    let emp = build_empirical(ds, prep.data_mdp.n_states(), prep.data_mdp.n_actions())?;
    let schedule = match &prep.cfg.radii_file {
        Some(path) => RadiusSchedule::fixed(load_radii(path, prep.data_mdp.n_states())?),
        None => radius_for_ci(&emp, prep.cfg.alpha, prep.value_bound, prep.cost.diam())?,
    };
    let inputs = robust_ope::robust_eval::EvalInputs {
        target: &prep.target,
        beta: &prep.beta,
        rewards: prep.ref_mdp.rewards(),
        emp: &emp,
        cost: &prep.cost,
        gamma: prep.cfg.gamma,
        initial_dist: prep.ref_mdp.initial_dist(),
    };
    let opts = IterationOptions::default();
    let lower = robust_value_iteration(&inputs, &schedule, &opts)?;
    let upper = optimistic_value_iteration(&inputs, &schedule, &opts)?;
    let plug_in = inputs.plug_in_value().ok();
    let mut notes = vec![
        "interval correction uses the plug-in transition matrix".into(),
        "initial distribution fixed by the benchmark constructors".into(),
    ];
    // the correction needs the plug-in resolvent; when that is unstable the
    // raw interval is still valid, so report it uncorrected with a note
    let (correction, corrected) = if args.corrected() {
        match correction_term(&emp, &prep.beta, prep.cfg.gamma, prep.ref_mdp.initial_dist()) {
            Ok(c) => (c, true),
            Err(e) => {
                notes.push(format!("correction unavailable: {e}"));
                (0.0, false)
            }
        }
    } else {
        (0.0, false)
    };
    let ci = confidence_interval(lower.bound, upper.bound, correction, prep.cfg.alpha, corrected)?;
    let diagnostics = contraction_diagnostics(
        &prep.beta,
        &emp,
        &schedule,
        prep.cfg.gamma,
        &prep.cost,
        None,
    );
    Ok(EstimateRecord {
        env: prep.cfg.env.to_string(),
        gamma: prep.cfg.gamma,
        alpha: prep.cfg.alpha,
        lower: lower.bound,
        upper: upper.bound,
        plug_in,
        ci,
        rho: schedule.rho.clone(),
        lambda_lower: lower.lambda,
        lambda_upper: upper.lambda,
        iterations_lower: lower.iterations,
        iterations_upper: upper.iterations,
        diagnostics,
        notes,
    })
}

fn ope(data: &PathBuf, args: &CommonArgs) -> Result<()> {
    let (ds, env) = load_with_env(data)?;
    let cfg = args.build_config(Some(env))?;
    let prep = prepare(&cfg)?;
    let record = estimate_on_dataset(&prep, &ds, args)?;
    write_json(&record, args.out.as_ref())
}

fn adversarial(data: &PathBuf, args: &CommonArgs) -> Result<()> {
    let (ds, env) = load_with_env(data)?;
    let cfg = args.build_config(Some(env))?;
    let prep = prepare(&cfg)?;
    let rho = match &cfg.radii_file {
        Some(path) => load_radii(path, prep.data_mdp.n_states())?,
        None => experiments::tune_adversarial_radius(&cfg)?,
    };
    let emp = build_empirical(&ds, prep.data_mdp.n_states(), prep.data_mdp.n_actions())?;
    let inputs = robust_ope::robust_eval::EvalInputs {
        target: &prep.target,
        beta: &prep.beta,
        rewards: prep.ref_mdp.rewards(),
        emp: &emp,
        cost: &prep.cost,
        gamma: cfg.gamma,
        initial_dist: prep.ref_mdp.initial_dist(),
    };
    let analysis = adversarial_analysis(&inputs, &rho, cfg.alpha, &IterationOptions::default())?;
    #[derive(serde::Serialize)]
    struct AdversarialReport {
        env: String,
        rho: Vec<f64>,
        #[serde(flatten)]
        analysis: robust_ope::adversarial::AdversarialEstimate,
        exact_adversarial_value: f64,
        future_value: f64,
    }
    let report = AdversarialReport {
        env: cfg.env.to_string(),
        rho: rho.clone(),
        exact_adversarial_value: experiments::exact_adversarial_value(&prep, &rho)?,
        future_value: prep.exact_value,
        analysis,
    };
    write_json(&report, args.out.as_ref())
}

fn batch_opt(data: &PathBuf, args: &CommonArgs) -> Result<()> {
    let (ds, env) = load_with_env(data)?;
    let cfg = args.build_config(Some(env))?;
    let prep = prepare(&cfg)?;
    let fixed = match &cfg.radii_file {
        Some(path) => Some(load_radii(path, prep.data_mdp.n_states())?),
        None => None,
    };
    // rerun the shared trial on the loaded dataset's own seed bookkeeping
    let trial = batch_trial(
        &prep,
        fixed.as_deref(),
        ds.meta.episodes,
        ds.meta.horizon,
        ds.meta.seed,
    )?;
    #[derive(serde::Serialize)]
    struct Arm {
        l_star: f64,
        actions: Vec<usize>,
        value_true: f64,
        relative_gap: f64,
    }
    #[derive(serde::Serialize)]
    struct BatchReport {
        env: String,
        robust: Option<Arm>,
        robust_error: Option<String>,
        saa: Option<Arm>,
        saa_error: Option<String>,
        correction: f64,
    }
    let arm = |r: &robust_ope::error::Result<experiments::BatchArm>| match r {
        Ok(a) => (
            Some(Arm {
                l_star: a.l_star,
                actions: a.policy.actions().unwrap_or_default(),
                value_true: a.value_true,
                relative_gap: a.gap,
            }),
            None,
        ),
        Err(e) => (None, Some(e.to_string())),
    };
    let (robust, robust_error) = arm(&trial.robust);
    let (saa, saa_error) = arm(&trial.saa);
    let report = BatchReport {
        env: cfg.env.to_string(),
        robust,
        robust_error,
        saa,
        saa_error,
        correction: trial.correction,
    };
    write_json(&report, args.out.as_ref())
}

fn coverage(args: &CommonArgs) -> Result<()> {
    let cfg = args.build_config(None)?;
    let rows = run_coverage(&cfg)?;
    let out = args.out_path()?;
    write_csv(&rows, out)?;
    write_sidecar(&cfg, out)?;
    eprintln!(
        "coverage: {} rows, miss rate {:.4}",
        rows.len(),
        miss_rate(&rows)
    );
    Ok(())
}

fn ci_sweep(args: &CommonArgs) -> Result<()> {
    let cfg = args.build_config(None)?;
    let rows = run_ci_sweep(&cfg)?;
    let out = args.out_path()?;
    write_csv(&rows, out)?;
    write_sidecar(&cfg, out)?;
    eprintln!("ci-sweep: {} rows", rows.len());
    Ok(())
}

fn adversarial_sweep(args: &CommonArgs) -> Result<()> {
    let cfg = args.build_config(None)?;
    let rows = run_adversarial(&cfg)?;
    let out = args.out_path()?;
    write_csv(&rows, out)?;
    write_sidecar(&cfg, out)?;
    eprintln!("adversarial: {} rows", rows.len());
    Ok(())
}

fn batch_sweep(args: &CommonArgs) -> Result<()> {
    let cfg = args.build_config(None)?;
    let rows = run_batch_compare(&cfg)?;
    let out = args.out_path()?;
    write_csv(&rows, out)?;
    write_sidecar(&cfg, out)?;
    eprintln!("batch-compare: {} rows", rows.len());
    Ok(())
}

fn tune_rho(args: &CommonArgs) -> Result<()> {
    let cfg = args.build_config(None)?;
    let rho = experiments::tune_adversarial_radius(&cfg)?;
    save_radii(args.out_path()?, &rho)?;
    eprintln!(
        "tuned uniform radius {} written to {}",
        rho[0],
        args.out_path()?.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Ope { data, common } => ope(data, common),
        Command::Adversarial { data: Some(data), common } => adversarial(data, common),
        Command::Adversarial { data: None, common } => adversarial_sweep(common),
        Command::BatchOpt { data: Some(data), common } => batch_opt(data, common),
        Command::BatchOpt { data: None, common } => batch_sweep(common),
        Command::Coverage(args) => coverage(args),
        Command::CiSweep(args) => ci_sweep(args),
        Command::TuneRho(args) => tune_rho(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
