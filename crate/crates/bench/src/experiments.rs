//! The experiment harnesses: interval sweeps, coverage simulation,
//! adversarial estimation under changing environments, and the batch
//! policy-optimization comparison.
//!
//! Every harness is deterministic: trials draw per-cell derived seeds, run
//! in parallel, and rows are sorted by key before they are written.

use rayon::prelude::*;
use robust_ope::adversarial::adversarial_analysis;
use robust_ope::batch_rl::{
    batch_radius, relative_gap, robust_policy_optimization, saa_policy_optimization, BatchInputs,
};
use robust_ope::empirical::{build_empirical, EmpiricalConditional};
use robust_ope::error::{OpeError, Result};
use robust_ope::mdp::{
    exact_policy_value, importance_ratios, FiniteMdp, ImportanceRatio, Policy,
};
use robust_ope::robust_eval::{
    confidence_interval, correction_term, default_value_bound, optimistic_value_iteration,
    radius_for_ci, robust_value_iteration, ConfidenceInterval, EvalInputs, IterationOptions,
    RadiusSchedule,
};
use robust_ope::trajectory::simulate;
use robust_ope::wdro::CostMetric;
use serde::Serialize;

use crate::config::{derive_seed, load_radii, ExperimentConfig};
use crate::envs::{default_cost, EnvRef};

/// Everything the harnesses share for one configuration: the data-collection
/// model, the reference (deployment) model, the policy pair, and the exact
/// target value on the reference model.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub data_mdp: FiniteMdp,
    pub ref_mdp: FiniteMdp,
    pub behavior: Policy,
    pub target: Policy,
    pub beta: ImportanceRatio,
    pub cost: CostMetric,
    pub value_bound: f64,
    pub exact_value: f64,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data_mdp = cfg.env.build(cfg.gamma)?;
    let ref_mdp = EnvRef::base(cfg.env.id).build(cfg.gamma)?;
    let behavior = cfg.behavior.build(&ref_mdp)?;
    let target = cfg.target.build(&ref_mdp)?;
    let beta = importance_ratios(&target, &behavior)?;
    let cost = default_cost(cfg.env.id);
    let value_bound = default_value_bound(ref_mdp.max_reward(), cfg.gamma);
    let exact_value = exact_policy_value(&ref_mdp, &target)?;
    Ok(Prepared {
        cfg: cfg.clone(),
        data_mdp,
        ref_mdp,
        behavior,
        target,
        beta,
        cost,
        value_bound,
        exact_value,
    })
}

impl Prepared {
    fn eval_inputs<'a>(&'a self, emp: &'a EmpiricalConditional) -> EvalInputs<'a> {
        EvalInputs {
            target: &self.target,
            beta: &self.beta,
            rewards: self.ref_mdp.rewards(),
            emp,
            cost: &self.cost,
            gamma: self.cfg.gamma,
            initial_dist: self.ref_mdp.initial_dist(),
        }
    }
}

/// One interval computation on one simulated dataset.
pub struct IntervalOutcome {
    pub lower: f64,
    pub upper: f64,
    pub plug_in: Option<f64>,
    pub correction: f64,
    pub ci: ConfidenceInterval,
    pub schedule: RadiusSchedule,
}

/// Simulates a dataset and runs the full interval pipeline at the
/// asymptotic radius schedule, or at fixed radii when the configuration
/// carries a radii file.
pub fn interval_trial(
    prep: &Prepared,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<IntervalOutcome> {
    let ds = simulate(
        &prep.data_mdp,
        &prep.behavior,
        episodes,
        horizon,
        seed,
        &prep.cfg.env.to_string(),
    )?;
    let emp = build_empirical(&ds, prep.data_mdp.n_states(), prep.data_mdp.n_actions())?;
    let schedule = match &prep.cfg.radii_file {
        Some(path) => RadiusSchedule::fixed(load_radii(path, prep.data_mdp.n_states())?),
        None => radius_for_ci(&emp, prep.cfg.alpha, prep.value_bound, prep.cost.diam())?,
    };
    let inputs = prep.eval_inputs(&emp);
    let opts = IterationOptions::default();
    let lower = robust_value_iteration(&inputs, &schedule, &opts)?;
    let upper = optimistic_value_iteration(&inputs, &schedule, &opts)?;
    let plug_in = inputs.plug_in_value().ok();
    let correction = correction_term(&emp, &prep.beta, prep.cfg.gamma, prep.ref_mdp.initial_dist())?;
    let ci = confidence_interval(
        lower.bound,
        upper.bound,
        correction,
        prep.cfg.alpha,
        prep.cfg.corrected,
    )?;
    Ok(IntervalOutcome {
        lower: lower.bound,
        upper: upper.bound,
        plug_in,
        correction,
        ci,
        schedule,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CiSweepRow {
    pub experiment: String,
    pub env: String,
    pub episodes: usize,
    pub horizon: usize,
    pub trial: usize,
    pub seed: u64,
    pub exact_value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub plug_in: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub lower_norm: Option<f64>,
    pub upper_norm: Option<f64>,
    pub width: Option<f64>,
    pub status: String,
}

/// Normalized lower/upper estimates across the episode and horizon grids.
pub fn run_ci_sweep(cfg: &ExperimentConfig) -> Result<Vec<CiSweepRow>> {
    let prep = prepare(cfg)?;
    let cells = grid_cells(cfg);
    let mut rows: Vec<CiSweepRow> = cells
        .par_iter()
        .map(|&(cell, episodes, horizon, trial)| {
            let seed = derive_seed(cfg.seed, cell, trial as u64);
            let base = CiSweepRow {
                experiment: "ci-sweep".into(),
                env: cfg.env.to_string(),
                episodes,
                horizon,
                trial,
                seed,
                exact_value: prep.exact_value,
                lower: None,
                upper: None,
                plug_in: None,
                ci_lower: None,
                ci_upper: None,
                lower_norm: None,
                upper_norm: None,
                width: None,
                status: "ok".into(),
            };
            match interval_trial(&prep, episodes, horizon, seed) {
                Ok(out) => CiSweepRow {
                    lower: Some(out.lower),
                    upper: Some(out.upper),
                    plug_in: out.plug_in,
                    ci_lower: Some(out.ci.lower),
                    ci_upper: Some(out.ci.upper),
                    lower_norm: Some(out.lower / prep.exact_value),
                    upper_norm: Some(out.upper / prep.exact_value),
                    width: Some(out.ci.width()),
                    ..base
                },
                Err(e) => CiSweepRow {
                    status: format!("error: {e}"),
                    ..base
                },
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.episodes, r.horizon, r.trial));
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageRow {
    pub experiment: String,
    pub env: String,
    pub episodes: usize,
    pub horizon: usize,
    pub trial: usize,
    pub seed: u64,
    pub exact_value: f64,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub covered: Option<u8>,
    pub status: String,
}

/// Per-trial interval coverage of the exact target value.
pub fn run_coverage(cfg: &ExperimentConfig) -> Result<Vec<CoverageRow>> {
    let prep = prepare(cfg)?;
    let cells = grid_cells(cfg);
    let mut rows: Vec<CoverageRow> = cells
        .par_iter()
        .map(|&(cell, episodes, horizon, trial)| {
            let seed = derive_seed(cfg.seed, cell, trial as u64);
            let base = CoverageRow {
                experiment: "coverage".into(),
                env: cfg.env.to_string(),
                episodes,
                horizon,
                trial,
                seed,
                exact_value: prep.exact_value,
                ci_lower: None,
                ci_upper: None,
                covered: None,
                status: "ok".into(),
            };
            match interval_trial(&prep, episodes, horizon, seed) {
                Ok(out) => CoverageRow {
                    ci_lower: Some(out.ci.lower),
                    ci_upper: Some(out.ci.upper),
                    covered: Some(u8::from(out.ci.contains(prep.exact_value))),
                    ..base
                },
                Err(e) => CoverageRow {
                    status: format!("error: {e}"),
                    ..base
                },
            }
        })
        .collect();
    rows.sort_by_key(|r| (r.episodes, r.horizon, r.trial));
    Ok(rows)
}

/// Fraction of ok-rows whose interval missed the exact value.
pub fn miss_rate(rows: &[CoverageRow]) -> f64 {
    let done: Vec<&CoverageRow> = rows.iter().filter(|r| r.covered.is_some()).collect();
    if done.is_empty() {
        return f64::NAN;
    }
    done.iter().filter(|r| r.covered == Some(0)).count() as f64 / done.len() as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct AdversarialRow {
    pub experiment: String,
    pub env: String,
    pub episodes: usize,
    pub horizon: usize,
    pub total_transitions: usize,
    pub trial: usize,
    pub seed: u64,
    pub adv_value: f64,
    pub future_value: f64,
    pub value: Option<f64>,
    pub normalized: Option<f64>,
    pub sigma2: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub covered: Option<u8>,
    pub status: String,
}

/// The adversarial value of the data-collection environment at the given
/// radii, computed from exact population conditionals.
pub fn exact_adversarial_value(prep: &Prepared, rho: &[f64]) -> Result<f64> {
    let emp = EmpiricalConditional::from_population(&prep.data_mdp, &prep.behavior)?;
    let inputs = prep.eval_inputs(&emp);
    let schedule = RadiusSchedule::fixed(rho.to_vec());
    let est = robust_value_iteration(&inputs, &schedule, &IterationOptions::default())?;
    Ok(est.bound)
}

/// Fixed-radius estimates with asymptotic error bars across the grids.
/// Data comes from the perturbed variant of the configured environment;
/// the interval targets the adversarial value of that data distribution.
pub fn run_adversarial(cfg: &ExperimentConfig) -> Result<Vec<AdversarialRow>> {
    let mut cfg = cfg.clone();
    cfg.env.perturbed = true;
    let prep = prepare(&cfg)?;
    let rho = match &cfg.radii_file {
        Some(path) => load_radii(path, prep.data_mdp.n_states())?,
        None => tune_adversarial_radius(&cfg)?,
    };
    let adv_value = exact_adversarial_value(&prep, &rho)?;
    let cells = grid_cells(&cfg);
    let mut rows: Vec<AdversarialRow> = cells
        .par_iter()
        .map(|&(cell, episodes, horizon, trial)| {
            let seed = derive_seed(cfg.seed, cell, trial as u64);
            let base = AdversarialRow {
                experiment: "adversarial".into(),
                env: cfg.env.to_string(),
                episodes,
                horizon,
                total_transitions: episodes * horizon,
                trial,
                seed,
                adv_value,
                future_value: prep.exact_value,
                value: None,
                normalized: None,
                sigma2: None,
                ci_lower: None,
                ci_upper: None,
                covered: None,
                status: "ok".into(),
            };
            let run = || -> Result<AdversarialRow> {
                let ds = simulate(
                    &prep.data_mdp,
                    &prep.behavior,
                    episodes,
                    horizon,
                    seed,
                    &cfg.env.to_string(),
                )?;
                let emp =
                    build_empirical(&ds, prep.data_mdp.n_states(), prep.data_mdp.n_actions())?;
                let inputs = prep.eval_inputs(&emp);
                let analysis =
                    adversarial_analysis(&inputs, &rho, cfg.alpha, &IterationOptions::default())?;
                Ok(AdversarialRow {
                    value: Some(analysis.value),
                    normalized: Some(analysis.value / adv_value),
                    sigma2: Some(analysis.sigma2),
                    ci_lower: Some(analysis.ci.lower),
                    ci_upper: Some(analysis.ci.upper),
                    covered: Some(u8::from(analysis.ci.contains(adv_value))),
                    ..base.clone()
                })
            };
            run().unwrap_or_else(|e| AdversarialRow {
                status: format!("error: {e}"),
                ..base
            })
        })
        .collect();
    rows.sort_by_key(|r| (r.episodes, r.horizon, r.trial));
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchRow {
    pub experiment: String,
    pub env: String,
    pub episodes: usize,
    pub horizon: usize,
    pub trial: usize,
    pub seed: u64,
    pub algo: String,
    pub l_star: Option<f64>,
    pub policy: Option<String>,
    pub value_true: Option<f64>,
    pub gap: Option<f64>,
    pub correction: Option<f64>,
    pub status: String,
}

/// Robust-versus-sample-average policy optimization over the grids. Each
/// trial emits one row per algorithm; gaps are evaluated exactly on the
/// reference model.
pub fn run_batch_compare(cfg: &ExperimentConfig) -> Result<Vec<BatchRow>> {
    let prep = prepare(cfg)?;
    let fixed_rho = match &cfg.radii_file {
        Some(path) => Some(load_radii(path, prep.data_mdp.n_states())?),
        None => None,
    };
    let cells = grid_cells(cfg);
    let mut rows: Vec<BatchRow> = cells
        .par_iter()
        .flat_map(|&(cell, episodes, horizon, trial)| {
            let seed = derive_seed(cfg.seed, cell, trial as u64);
            let template = BatchRow {
                experiment: "batch-compare".into(),
                env: cfg.env.to_string(),
                episodes,
                horizon,
                trial,
                seed,
                algo: String::new(),
                l_star: None,
                policy: None,
                value_true: None,
                gap: None,
                correction: None,
                status: "ok".into(),
            };
            let outcome = batch_trial(&prep, fixed_rho.as_deref(), episodes, horizon, seed);
            ["robust", "saa"]
                .into_iter()
                .map(|algo| {
                    let mut row = BatchRow {
                        algo: algo.into(),
                        ..template.clone()
                    };
                    match &outcome {
                        Ok(t) => {
                            let (result, correction) = match algo {
                                "robust" => (&t.robust, Some(t.correction)),
                                _ => (&t.saa, None),
                            };
                            match result {
                                Ok(r) => {
                                    row.l_star = Some(r.l_star);
                                    row.policy = Some(policy_string(&r.policy));
                                    row.value_true = Some(r.value_true);
                                    row.gap = Some(r.gap);
                                    row.correction = correction;
                                }
                                Err(e) => row.status = format!("error: {e}"),
                            }
                        }
                        Err(e) => row.status = format!("error: {e}"),
                    }
                    row
                })
                .collect::<Vec<_>>()
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.episodes, a.horizon, a.trial, &a.algo).cmp(&(b.episodes, b.horizon, b.trial, &b.algo))
    });
    Ok(rows)
}

pub struct BatchArm {
    pub l_star: f64,
    pub policy: Policy,
    pub value_true: f64,
    pub gap: f64,
}

pub struct BatchTrial {
    pub robust: Result<BatchArm>,
    pub saa: Result<BatchArm>,
    pub correction: f64,
}

/// Runs both optimizers on one simulated dataset.
pub fn batch_trial(
    prep: &Prepared,
    fixed_rho: Option<&[f64]>,
    episodes: usize,
    horizon: usize,
    seed: u64,
) -> Result<BatchTrial> {
    let ds = simulate(
        &prep.data_mdp,
        &prep.behavior,
        episodes,
        horizon,
        seed,
        &prep.cfg.env.to_string(),
    )?;
    let emp = build_empirical(&ds, prep.data_mdp.n_states(), prep.data_mdp.n_actions())?;
    let inputs = BatchInputs {
        behavior: &prep.behavior,
        rewards: prep.ref_mdp.rewards(),
        emp: &emp,
        cost: &prep.cost,
        gamma: prep.cfg.gamma,
        initial_dist: prep.ref_mdp.initial_dist(),
    };
    let opts = IterationOptions::default();
    let schedule = match fixed_rho {
        Some(rho) => RadiusSchedule::fixed(rho.to_vec()),
        None => batch_radius(
            &emp,
            prep.cfg.alpha,
            prep.value_bound,
            prep.cost.diam(),
            prep.data_mdp.n_actions(),
        )?,
    };
    let beta_b = ImportanceRatio::on_policy(prep.data_mdp.n_states(), prep.data_mdp.n_actions());
    let correction = correction_term(&emp, &beta_b, prep.cfg.gamma, prep.ref_mdp.initial_dist())?;
    let finish = |result: robust_ope::batch_rl::BatchResult| -> Result<BatchArm> {
        let value_true = exact_policy_value(&prep.ref_mdp, &result.policy)?;
        let gap = relative_gap(&prep.ref_mdp, &result.policy)?;
        Ok(BatchArm {
            l_star: result.l_star,
            policy: result.policy,
            value_true,
            gap,
        })
    };
    let robust = robust_policy_optimization(&inputs, &schedule, &opts).and_then(finish);
    let saa = saa_policy_optimization(&inputs, &opts).and_then(finish);
    Ok(BatchTrial {
        robust,
        saa,
        correction,
    })
}

fn policy_string(policy: &Policy) -> String {
    match policy.actions() {
        Some(actions) => actions
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join("-"),
        None => "stochastic".into(),
    }
}

/// Smallest uniform radius multiplier (of the metric diameter) at which the
/// adversarial value of the perturbed environment drops to or below the
/// exact future-environment value. Bisection on [0, 2]; deterministic.
pub fn tune_adversarial_radius(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let mut cfg = cfg.clone();
    cfg.env.perturbed = true;
    let prep = prepare(&cfg)?;
    tune_radius_between(&prep.data_mdp, &prep.ref_mdp, &prep)
}

/// The general tuner over an explicit (data environment, future environment)
/// pair. Returns uniform radii m·diam with the smallest bisection-grid m for
/// which the data environment's adversarial value at those radii sits at or
/// below the future environment's exact target value.
pub fn tune_radius_between(
    data_mdp: &FiniteMdp,
    future_mdp: &FiniteMdp,
    prep: &Prepared,
) -> Result<Vec<f64>> {
    let n = data_mdp.n_states();
    let diam = prep.cost.diam();
    let target_value = exact_policy_value(future_mdp, &prep.target)?;
    let emp = EmpiricalConditional::from_population(data_mdp, &prep.behavior)?;
    let inputs = EvalInputs {
        target: &prep.target,
        beta: &prep.beta,
        rewards: future_mdp.rewards(),
        emp: &emp,
        cost: &prep.cost,
        gamma: prep.cfg.gamma,
        initial_dist: future_mdp.initial_dist(),
    };
    let ladv = |multiplier: f64| -> Result<f64> {
        let schedule = RadiusSchedule::fixed(vec![multiplier * diam; n]);
        Ok(robust_value_iteration(&inputs, &schedule, &IterationOptions::default())?.bound)
    };
    // numerical slack so the zero-perturbation case resolves to 0
    let achieves = |value: f64| value <= target_value + 1e-9;
    if achieves(ladv(0.0)?) {
        return Ok(vec![0.0; n]);
    }
    let mut lo = 0.0f64;
    let mut hi = 2.0f64;
    if !achieves(ladv(hi)?) {
        return Err(OpeError::InvalidInput(format!(
            "no radius up to {hi}×diam brings the adversarial value below {target_value}"
        )));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if achieves(ladv(mid)?) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(vec![hi * diam; n])
}

fn grid_cells(cfg: &ExperimentConfig) -> Vec<(u64, usize, usize, usize)> {
    let mut cells = Vec::new();
    let mut cell_index = 0u64;
    for &episodes in &cfg.episodes_grid {
        for &horizon in &cfg.horizon_grid {
            for trial in 0..cfg.trials {
                cells.push((cell_index, episodes, horizon, trial));
            }
            cell_index += 1;
        }
    }
    cells
}
