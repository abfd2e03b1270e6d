//! Distributionally robust batch policy optimization and the sample-average
//! baseline.
//!
//! Each sweep applies the joint operator
//!
//! ```text
//! v(s) ← max_{a'} [ r(s,a') + γ · min { E_μ[f_{a'}] : W(μ, μ̂_s) ≤ ρ_s } ]
//! f_{a'}(a, s') = v(s') · 1{a = a'} / π_b(a'|s)
//! ```
//!
//! which is the fixed point of the max–min formulation restricted to
//! deterministic per-state choices; the converged greedy actions define the
//! policy. Note f_{a'} is zero at every atom whose action differs from a',
//! so the adversary may park mass on off-policy actions.

use serde::Serialize;

use crate::empirical::EmpiricalConditional;
use crate::error::{OpeError, Result};
use crate::mdp::{exact_policy_value, optimal_policy, FiniteMdp, Policy, ValueFunction};
use crate::robust_eval::{asymptotic_schedule, IterationOptions, RadiusSchedule};
use crate::wdro::{lipschitz_norm, robust_inner, CostMetric};

/// Outcome of a batch optimization run.
#[derive(Debug, Clone, Serialize)]
pub struct BatchResult {
    pub policy: Policy,
    pub v_star: ValueFunction,
    /// (1−γ) d_0ᵀ v*
    pub l_star: f64,
    pub iterations: usize,
    pub sup_norm_residual: f64,
    /// Worst contraction margin over deterministic per-state choices.
    pub margins: Vec<f64>,
    pub warnings: Vec<String>,
}

/// The batch schedule: τ = log(|S|/α), τ_s = τ + log(2|A| n_s M).
pub fn batch_radius(
    emp: &EmpiricalConditional,
    alpha: f64,
    value_bound: f64,
    diam: f64,
    n_actions: usize,
) -> Result<RadiusSchedule> {
    let tau0 = (emp.n_states as f64 / alpha).ln();
    asymptotic_schedule(emp, alpha, tau0, value_bound, diam, n_actions as f64)
}

/// Inputs shared by the batch optimizers.
#[derive(Clone, Copy)]
pub struct BatchInputs<'a> {
    pub behavior: &'a Policy,
    /// Reward table r(s,a), row-major.
    pub rewards: &'a [f64],
    pub emp: &'a EmpiricalConditional,
    pub cost: &'a CostMetric,
    pub gamma: f64,
    pub initial_dist: &'a [f64],
}

impl<'a> BatchInputs<'a> {
    fn validate(&self) -> Result<()> {
        let (n, m) = (self.emp.n_states, self.emp.n_actions);
        if self.behavior.n_states() != n || self.behavior.n_actions() != m {
            return Err(OpeError::DimensionMismatch(
                "behavior policy does not match the conditionals".into(),
            ));
        }
        if self.rewards.len() != n * m {
            return Err(OpeError::DimensionMismatch("reward table shape".into()));
        }
        if self.cost.n_states() != n || self.cost.n_actions() != m {
            return Err(OpeError::DimensionMismatch("cost metric shape".into()));
        }
        if self.initial_dist.len() != n {
            return Err(OpeError::DimensionMismatch("initial distribution shape".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(OpeError::InvalidInput(format!(
                "discount must lie in (0,1), got {}",
                self.gamma
            )));
        }
        for s in 0..n {
            for a in 0..m {
                if self.behavior.prob(s, a) <= 0.0 {
                    return Err(OpeError::SupportViolation { pairs: vec![(s, a)] });
                }
            }
        }
        Ok(())
    }

    fn r(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.emp.n_actions + a]
    }
}

/// Robust batch policy optimization at the given radius schedule.
pub fn robust_policy_optimization(
    inputs: &BatchInputs,
    schedule: &RadiusSchedule,
    opts: &IterationOptions,
) -> Result<BatchResult> {
    optimize(inputs, Some(schedule), opts)
}

/// The sample-average baseline: the radius-zero specialization. The
/// sufficient contraction condition γ·μ̂(a|s)/π_b(a|s) < 1 is checked per
/// action row; rows outside it are reported as warnings and the recursion
/// runs with divergence detection, so a genuinely non-contractive plug-in
/// still fails with diagnostics. Marginal sampling fluctuations in one
/// action frequency routinely break the sufficient condition without making
/// the selected system expansive.
pub fn saa_policy_optimization(inputs: &BatchInputs, opts: &IterationOptions) -> Result<BatchResult> {
    inputs.validate()?;
    inputs.emp.require_full_coverage()?;
    let (n, m, gamma) = (inputs.emp.n_states, inputs.emp.n_actions, inputs.gamma);
    let mut warnings = Vec::new();
    for s in 0..n {
        let marginal = inputs.emp.states[s].action_marginal(m);
        for a in 0..m {
            let row_sum = marginal[a] / inputs.behavior.prob(s, a);
            if gamma * row_sum >= 1.0 {
                warnings.push(format!(
                    "state {s} action {a}: gamma * plug-in row sum = {:.6} >= 1; outside the sufficient contraction condition",
                    gamma * row_sum
                ));
            }
        }
    }
    let mut result = optimize(inputs, None, opts)?;
    result.warnings.extend(warnings);
    Ok(result)
}

/// `schedule = None` runs the radius-zero (sample-average) recursion.
fn optimize(
    inputs: &BatchInputs,
    schedule: Option<&RadiusSchedule>,
    opts: &IterationOptions,
) -> Result<BatchResult> {
    inputs.validate()?;
    inputs.emp.require_full_coverage()?;
    let (n, m, gamma) = (inputs.emp.n_states, inputs.emp.n_actions, inputs.gamma);
    if let Some(s) = schedule {
        if s.n_states() != n {
            return Err(OpeError::DimensionMismatch("schedule shape".into()));
        }
    }
    let atoms: Vec<Vec<(usize, f64)>> = inputs
        .emp
        .states
        .iter()
        .map(|st| st.weighted_points(n))
        .collect();
    // Per-state, per-action contraction margins over the deterministic
    // choices; violations warn, matching the probabilistic premise.
    let threshold = (1.0 - gamma) / (2.0 * gamma);
    let eps = crate::robust_eval::default_epsilon(gamma);
    let mut margins = vec![f64::INFINITY; n];
    let mut warnings = Vec::new();
    if let Some(schedule) = schedule {
        for s in 0..n {
            let support: Vec<usize> = atoms[s].iter().map(|&(z, _)| z).collect();
            for a_choice in 0..m {
                let mut f = vec![0.0; inputs.cost.n_points()];
                let scale = 1.0 / inputs.behavior.prob(s, a_choice);
                for s2 in 0..n {
                    f[a_choice * n + s2] = scale;
                }
                let lip = lipschitz_norm(&f, &support, inputs.cost).unwrap_or(f64::INFINITY);
                margins[s] = margins[s].min(threshold - eps - schedule.rho[s] * lip);
            }
            if margins[s] < 0.0 {
                warnings.push(format!(
                    "state {s}: contraction premise fails over deterministic choices (margin {:.4})",
                    margins[s]
                ));
            }
        }
    } else {
        for s in 0..n {
            margins[s] = threshold - eps;
        }
    }
    let max_reward = inputs.rewards.iter().cloned().fold(0.0, f64::max);
    let divergence_cap = 1e3
        * opts
            .value_bound
            .unwrap_or_else(|| crate::robust_eval::default_value_bound(max_reward, gamma))
            .max(1.0);
    let mut v = vec![0.0; n];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut f = vec![0.0; inputs.cost.n_points()];
    while iterations < opts.max_sweeps {
        iterations += 1;
        residual = 0.0;
        let mut v_next = vec![0.0; n];
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a_choice in 0..m {
                let inner = match schedule {
                    Some(schedule) => {
                        let scale = 1.0 / inputs.behavior.prob(s, a_choice);
                        for z in f.iter_mut() {
                            *z = 0.0;
                        }
                        for s2 in 0..n {
                            f[a_choice * n + s2] = v[s2] * scale;
                        }
                        robust_inner(&f, &atoms[s], schedule.rho[s], inputs.cost)?.0
                    }
                    None => {
                        let scale = 1.0 / inputs.behavior.prob(s, a_choice);
                        atoms[s]
                            .iter()
                            .filter(|&&(z, _)| z / n == a_choice)
                            .map(|&(z, w)| w * v[z % n] * scale)
                            .sum()
                    }
                };
                let q = inputs.r(s, a_choice) + gamma * inner;
                if q > best {
                    best = q;
                }
            }
            v_next[s] = best;
            let delta = (v_next[s] - v[s]).abs();
            if !delta.is_finite() || v_next[s].abs() > divergence_cap {
                return Err(OpeError::NoConvergence {
                    cap: iterations,
                    residual: delta,
                    margins,
                });
            }
            residual = residual.max(delta);
        }
        v = v_next;
        if residual < opts.tol {
            break;
        }
    }
    if residual >= opts.tol {
        return Err(OpeError::NoConvergence {
            cap: opts.max_sweeps,
            residual,
            margins,
        });
    }
    // greedy actions at the converged value, ties to the lowest index
    let mut actions = vec![0usize; n];
    for s in 0..n {
        let mut best = f64::NEG_INFINITY;
        for a_choice in 0..m {
            let inner = match schedule {
                Some(schedule) => {
                    let scale = 1.0 / inputs.behavior.prob(s, a_choice);
                    let mut fa = vec![0.0; inputs.cost.n_points()];
                    for s2 in 0..n {
                        fa[a_choice * n + s2] = v[s2] * scale;
                    }
                    robust_inner(&fa, &atoms[s], schedule.rho[s], inputs.cost)?.0
                }
                None => {
                    let scale = 1.0 / inputs.behavior.prob(s, a_choice);
                    atoms[s]
                        .iter()
                        .filter(|&&(z, _)| z / n == a_choice)
                        .map(|&(z, w)| w * v[z % n] * scale)
                        .sum()
                }
            };
            let q = inputs.r(s, a_choice) + gamma * inner;
            if q > best {
                best = q;
                actions[s] = a_choice;
            }
        }
    }
    let policy = Policy::greedy(m, &actions)?;
    let l_star = (1.0 - gamma)
        * inputs
            .initial_dist
            .iter()
            .zip(&v)
            .map(|(d, vs)| d * vs)
            .sum::<f64>();
    Ok(BatchResult {
        policy,
        v_star: ValueFunction(v),
        l_star,
        iterations,
        sup_norm_residual: residual,
        margins,
        warnings,
    })
}

/// Percent shortfall of a policy against the true optimum:
/// 100·(J* − J(π))/|J*|, both evaluated exactly on the true model.
pub fn relative_gap(mdp_true: &FiniteMdp, policy: &Policy) -> Result<f64> {
    let (_, j_star) = optimal_policy(mdp_true, 1e-10)?;
    if j_star == 0.0 {
        return Err(OpeError::InvalidInput(
            "relative gap is undefined when the optimal value is 0".into(),
        ));
    }
    let j_pi = exact_policy_value(mdp_true, policy)?;
    Ok(100.0 * (j_star - j_pi) / j_star.abs())
}
