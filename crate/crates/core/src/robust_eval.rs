//! Robust and optimistic value iteration, Wasserstein radius schedules,
//! correction terms, and confidence-interval assembly.
//!
//! The lower estimate iterates
//!
//! ```text
//! v(s) ← Σ_a π(a|s) r(s,a) + γ · min { E_μ[v(s')β_s(a)] : W(μ, μ̂_s) ≤ ρ_s }
//! ```
//!
//! from v ≡ 0 until the sup-norm change falls below tolerance, and reports
//! L = (1−γ) d_0ᵀ v. The upper estimate replaces min by max. Radii come from
//! per-state schedules ρ_s = √(2τ_s/n_s)·diam with τ_s chosen for either a
//! target error probability per state or an asymptotic (1−α) level.

use serde::{Deserialize, Serialize};

use crate::empirical::{plug_in_transition, resolvent_solve, EmpiricalConditional};
use crate::error::{OpeError, Result};
use crate::mdp::{ImportanceRatio, Policy, ValueFunction};
use crate::wdro::{lipschitz_norm, optimistic_inner, robust_inner, CostMetric};

/// How a schedule's radii were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMode {
    /// Caller-supplied per-state τ_s.
    NonAsymptotic,
    /// τ_s = τ + log(2 n_s M) with τ set from the nominal level.
    Asymptotic,
    /// Radii supplied directly; no τ bookkeeping.
    Fixed,
}

/// Per-state Wasserstein radii plus the parameters that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiusSchedule {
    pub rho: Vec<f64>,
    pub tau: Vec<f64>,
    pub alpha: Option<f64>,
    pub value_bound: Option<f64>,
    pub diam: f64,
    pub mode: RadiusMode,
}

impl RadiusSchedule {
    /// Radii from explicit per-state τ_s: ρ_s = √(2 τ_s / n_s) · diam.
    pub fn from_taus(
        emp: &EmpiricalConditional,
        taus: Vec<f64>,
        value_bound: f64,
        diam: f64,
    ) -> Result<Self> {
        emp.require_full_coverage()?;
        if taus.len() != emp.n_states {
            return Err(OpeError::DimensionMismatch(format!(
                "{} taus for {} states",
                taus.len(),
                emp.n_states
            )));
        }
        if taus.iter().any(|&t| t < 0.0 || !t.is_finite()) {
            return Err(OpeError::InvalidInput(
                "per-state tau values must be finite and nonnegative".into(),
            ));
        }
        let rho = taus
            .iter()
            .zip(&emp.states)
            .map(|(&t, st)| (2.0 * t / st.n).sqrt() * diam)
            .collect();
        Ok(Self {
            rho,
            tau: taus,
            alpha: None,
            value_bound: Some(value_bound),
            diam,
            mode: RadiusMode::NonAsymptotic,
        })
    }

    /// Radii supplied directly (adversarial / changing-environment mode).
    pub fn fixed(rho: Vec<f64>) -> Self {
        Self {
            rho,
            tau: Vec::new(),
            alpha: None,
            value_bound: None,
            diam: 0.0,
            mode: RadiusMode::Fixed,
        }
    }

    pub fn n_states(&self) -> usize {
        self.rho.len()
    }
}

/// The asymptotic (1−α) schedule: τ = log(2|S|/α), τ_s = τ + log(2 n_s M),
/// ρ_s = √(2 τ_s / n_s) · diam.
pub fn radius_for_ci(
    emp: &EmpiricalConditional,
    alpha: f64,
    value_bound: f64,
    diam: f64,
) -> Result<RadiusSchedule> {
    let tau0 = (2.0 * emp.n_states as f64 / alpha).ln();
    asymptotic_schedule(emp, alpha, tau0, value_bound, diam, 1.0)
}

/// Shared construction for the evaluation and batch schedules. `tau0` is the
/// global offset and `action_factor` multiplies the per-state log argument
/// (1 for evaluation, |A| for batch optimization).
pub(crate) fn asymptotic_schedule(
    emp: &EmpiricalConditional,
    alpha: f64,
    tau0: f64,
    value_bound: f64,
    diam: f64,
    action_factor: f64,
) -> Result<RadiusSchedule> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(OpeError::InvalidInput(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    if value_bound <= 0.0 {
        return Err(OpeError::InvalidInput("value bound must be positive".into()));
    }
    emp.require_full_coverage()?;
    let taus: Vec<f64> = emp
        .states
        .iter()
        .map(|st| tau0 + (2.0 * action_factor * st.n * value_bound).ln())
        .collect();
    if taus.iter().any(|&t| t < 0.0) {
        return Err(OpeError::InvalidInput(
            "schedule parameters produce a negative tau_s; increase the value bound or sample size"
                .into(),
        ));
    }
    let mut schedule = RadiusSchedule::from_taus(emp, taus, value_bound, diam)?;
    schedule.alpha = Some(alpha);
    schedule.mode = RadiusMode::Asymptotic;
    Ok(schedule)
}

/// Default value bound 2·r_max/(1−γ): iterates from 0 under a
/// (1+γ)/2-contraction stay below r_max/(1−(1+γ)/2).
pub fn default_value_bound(max_reward: f64, gamma: f64) -> f64 {
    2.0 * max_reward / (1.0 - gamma)
}

/// Default ε_s for the contraction diagnostics: the midpoint of the
/// admissible range (0, (1−γ)/(2γ)).
pub fn default_epsilon(gamma: f64) -> f64 {
    (1.0 - gamma) / (4.0 * gamma)
}

/// Per-state contraction diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateDiagnostics {
    pub lipschitz: f64,
    pub margin: f64,
    pub pass: bool,
}

/// Contraction report: per-state margins for the premise
/// ρ_s·‖β_s‖_Lip ≤ (1−γ)/(2γ) − ε_s, plus the sample-size comparison
/// min_s n_s/M_s² against (γ²/(1−γ)²)·log(|S|/τ).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContractionReport {
    pub per_state: Vec<StateDiagnostics>,
    pub epsilon: Vec<f64>,
    pub all_pass: bool,
    pub min_sample_ratio: f64,
    pub sample_requirement: f64,
}

/// Evaluates the contraction premise at every state. ε_s defaults to
/// (1−γ)/(4γ) when not supplied.
pub fn contraction_diagnostics(
    beta: &ImportanceRatio,
    emp: &EmpiricalConditional,
    schedule: &RadiusSchedule,
    gamma: f64,
    cost: &CostMetric,
    epsilon: Option<&[f64]>,
) -> ContractionReport {
    let n = emp.n_states;
    let eps: Vec<f64> = match epsilon {
        Some(e) => e.to_vec(),
        None => vec![default_epsilon(gamma); n],
    };
    let threshold = (1.0 - gamma) / (2.0 * gamma);
    let mut per_state = Vec::with_capacity(n);
    let mut min_ratio = f64::INFINITY;
    for s in 0..n {
        let cond = &emp.states[s];
        let lipschitz = if cond.is_empty() {
            0.0
        } else {
            let f = beta_point_function(beta, s, emp.n_states);
            let support: Vec<usize> = cond
                .weighted_points(emp.n_states)
                .iter()
                .map(|&(z, _)| z)
                .collect();
            lipschitz_norm(&f, &support, cost).unwrap_or(f64::INFINITY)
        };
        let rho = schedule.rho.get(s).copied().unwrap_or(0.0);
        let margin = threshold - eps[s] - rho * lipschitz;
        per_state.push(StateDiagnostics {
            lipschitz,
            margin,
            pass: margin >= 0.0,
        });
        let span = beta.span(s);
        let ratio = if span == 0.0 {
            f64::INFINITY
        } else {
            cond.n / (span * span)
        };
        min_ratio = min_ratio.min(ratio);
    }
    let tau_report = schedule.alpha.unwrap_or(0.05);
    let sample_requirement =
        gamma * gamma / ((1.0 - gamma) * (1.0 - gamma)) * (n as f64 / tau_report).ln();
    ContractionReport {
        all_pass: per_state.iter().all(|d| d.pass),
        per_state,
        epsilon: eps,
        min_sample_ratio: min_ratio,
        sample_requirement,
    }
}

/// β_s as a function on the flat point space: value β_s(a) at point (a, s').
fn beta_point_function(beta: &ImportanceRatio, s: usize, n_states: usize) -> Vec<f64> {
    let mut f = vec![0.0; beta.n_actions() * n_states];
    for a in 0..beta.n_actions() {
        for s2 in 0..n_states {
            f[a * n_states + s2] = beta.beta(s, a);
        }
    }
    f
}

/// Treatment of states with no logged transitions during value iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingState {
    /// Refuse to run (default).
    Error,
    /// Substitute the directional bound for the reward-to-go: 0 in lower
    /// recursions, the value bound M in upper recursions.
    Bound,
}

/// Options for the fixed-point iterations.
#[derive(Debug, Clone, Copy)]
pub struct IterationOptions {
    pub tol: f64,
    pub max_sweeps: usize,
    pub missing_state: MissingState,
    /// Value bound M for the clamp check; defaults to 2·r_max/(1−γ).
    pub value_bound: Option<f64>,
}

impl Default for IterationOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_sweeps: crate::mdp::MAX_VI_SWEEPS,
            missing_state: MissingState::Error,
            value_bound: None,
        }
    }
}

/// Which side a robust estimate bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Lower,
    Upper,
}

/// A converged robust or optimistic fixed point and its scalar bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustEstimate {
    pub kind: BoundKind,
    pub value: ValueFunction,
    /// (1−γ) Σ_s d_0(s) v(s)
    pub bound: f64,
    /// Attaining dual variable per state at the converged value; null in
    /// JSON output for radius-zero states (the dual is unconstrained there).
    pub lambda: Vec<f64>,
    pub iterations: usize,
    pub sup_norm_residual: f64,
    pub diagnostics: ContractionReport,
    /// Set when some converged |v(s)| exceeds the value bound M. Reported,
    /// never clamped.
    pub bound_violation: bool,
    pub warnings: Vec<String>,
}

/// Shared inputs of the trajectory-data estimators.
#[derive(Clone, Copy)]
pub struct EvalInputs<'a> {
    pub target: &'a Policy,
    pub beta: &'a ImportanceRatio,
    /// Reward table r(s,a), row-major, from the model the data was logged on.
    pub rewards: &'a [f64],
    pub emp: &'a EmpiricalConditional,
    pub cost: &'a CostMetric,
    pub gamma: f64,
    pub initial_dist: &'a [f64],
}

impl<'a> EvalInputs<'a> {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.emp.n_states, self.emp.n_actions);
        if self.target.n_states() != n
            || self.target.n_actions() != m
            || self.beta.n_states() != n
            || self.beta.n_actions() != m
        {
            return Err(OpeError::DimensionMismatch(
                "policy or ratio tables do not match the conditionals".into(),
            ));
        }
        if self.rewards.len() != n * m {
            return Err(OpeError::DimensionMismatch(format!(
                "reward table has {} entries, expected {}",
                self.rewards.len(),
                n * m
            )));
        }
        if self.cost.n_states() != n || self.cost.n_actions() != m {
            return Err(OpeError::DimensionMismatch(
                "cost metric does not match the conditionals".into(),
            ));
        }
        if self.initial_dist.len() != n {
            return Err(OpeError::DimensionMismatch(
                "initial distribution does not match the conditionals".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(OpeError::InvalidInput(format!(
                "discount must lie in (0,1), got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    /// r_π(s) = Σ_a π(a|s) r(s,a)
    pub fn target_reward(&self) -> Vec<f64> {
        let m = self.emp.n_actions;
        (0..self.emp.n_states)
            .map(|s| {
                (0..m)
                    .map(|a| self.target.prob(s, a) * self.rewards[s * m + a])
                    .sum()
            })
            .collect()
    }

    pub fn max_reward(&self) -> f64 {
        self.rewards.iter().cloned().fold(0.0, f64::max)
    }

    /// The radius-zero sample-average estimate.
    pub fn plug_in_value(&self) -> Result<f64> {
        self.validate()?;
        crate::empirical::plug_in_value(
            self.emp,
            self.beta,
            &self.target_reward(),
            self.initial_dist,
            self.gamma,
        )
    }
}

/// Robust (lower) value iteration; see the module docs for the recursion.
pub fn robust_value_iteration(
    inputs: &EvalInputs,
    schedule: &RadiusSchedule,
    opts: &IterationOptions,
) -> Result<RobustEstimate> {
    iterate(inputs, schedule, opts, BoundKind::Lower)
}

/// Optimistic (upper) value iteration, the max-over-the-ball mirror.
pub fn optimistic_value_iteration(
    inputs: &EvalInputs,
    schedule: &RadiusSchedule,
    opts: &IterationOptions,
) -> Result<RobustEstimate> {
    iterate(inputs, schedule, opts, BoundKind::Upper)
}

fn iterate(
    inputs: &EvalInputs,
    schedule: &RadiusSchedule,
    opts: &IterationOptions,
    kind: BoundKind,
) -> Result<RobustEstimate> {
    inputs.validate()?;
    let emp = inputs.emp;
    let n = emp.n_states;
    if schedule.n_states() != n {
        return Err(OpeError::DimensionMismatch(format!(
            "schedule covers {} states, conditionals have {n}",
            schedule.n_states()
        )));
    }
    if schedule.rho.iter().any(|&r| r < 0.0 || !r.is_finite()) {
        return Err(OpeError::InvalidInput("radii must be finite and nonnegative".into()));
    }
    let uncovered = emp.uncovered_states();
    if !uncovered.is_empty() && opts.missing_state == MissingState::Error {
        return Err(OpeError::UncoveredStates { states: uncovered });
    }
    let value_bound = opts
        .value_bound
        .unwrap_or_else(|| default_value_bound(inputs.max_reward(), inputs.gamma));
    let diagnostics =
        contraction_diagnostics(inputs.beta, emp, schedule, inputs.gamma, inputs.cost, None);
    let r_pi = inputs.target_reward();
    let atoms: Vec<Vec<(usize, f64)>> = emp
        .states
        .iter()
        .map(|st| st.weighted_points(n))
        .collect();
    let missing_reward_to_go = match kind {
        BoundKind::Lower => 0.0,
        BoundKind::Upper => value_bound,
    };
    // Iterates in any contractive regime stay below the value bound; a large
    // multiple of it means the recursion is expanding, not converging.
    let divergence_cap = 1e3 * value_bound.max(1.0);
    let mut v = vec![0.0; n];
    let mut lambda = vec![f64::INFINITY; n];
    let mut f = vec![0.0; inputs.cost.n_points()];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < opts.max_sweeps {
        iterations += 1;
        residual = 0.0;
        let mut v_next = vec![0.0; n];
        for s in 0..n {
            let inner = if atoms[s].is_empty() {
                missing_reward_to_go
            } else {
                for a in 0..emp.n_actions {
                    let b = inputs.beta.beta(s, a);
                    for s2 in 0..n {
                        f[a * n + s2] = v[s2] * b;
                    }
                }
                let (val, lam) = match kind {
                    BoundKind::Lower => robust_inner(&f, &atoms[s], schedule.rho[s], inputs.cost)?,
                    BoundKind::Upper => {
                        optimistic_inner(&f, &atoms[s], schedule.rho[s], inputs.cost)?
                    }
                };
                lambda[s] = lam;
                val
            };
            v_next[s] = r_pi[s] + inputs.gamma * inner;
            let delta = (v_next[s] - v[s]).abs();
            if !delta.is_finite() || v_next[s].abs() > divergence_cap {
                return Err(OpeError::NoConvergence {
                    cap: iterations,
                    residual: delta,
                    margins: diagnostics.per_state.iter().map(|d| d.margin).collect(),
                });
            }
            residual = residual.max(delta);
        }
        v = v_next;
        if residual < opts.tol {
            let bound = (1.0 - inputs.gamma)
                * inputs
                    .initial_dist
                    .iter()
                    .zip(&v)
                    .map(|(d, vs)| d * vs)
                    .sum::<f64>();
            let bound_violation = v.iter().any(|x| x.abs() > value_bound);
            let mut warnings = Vec::new();
            if bound_violation {
                warnings.push(format!(
                    "converged values exceed the bound M = {value_bound}; estimate kept unclamped"
                ));
            }
            return Ok(RobustEstimate {
                kind,
                value: ValueFunction(v),
                bound,
                lambda,
                iterations,
                sup_norm_residual: residual,
                diagnostics,
                bound_violation,
                warnings,
            });
        }
    }
    Err(OpeError::NoConvergence {
        cap: opts.max_sweeps,
        residual,
        margins: diagnostics.per_state.iter().map(|d| d.margin).collect(),
    })
}

/// The higher-order correction d_0ᵀ (I − γ P_μ̂)⁻¹ ε_n with ε_{n,s} = 6/n_s.
/// The unknown true transition is replaced by the plug-in, which is flagged
/// in emitted metadata.
pub fn correction_term(
    emp: &EmpiricalConditional,
    beta: &ImportanceRatio,
    gamma: f64,
    initial_dist: &[f64],
) -> Result<f64> {
    emp.require_full_coverage()?;
    let p = plug_in_transition(emp, beta)?;
    let eps: Vec<f64> = emp.states.iter().map(|st| 6.0 / st.n).collect();
    let x = resolvent_solve(&p, &eps, gamma)?;
    Ok(initial_dist.iter().zip(&x).map(|(d, v)| d * v).sum())
}

/// A two-sided interval for the target value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub correction: f64,
    pub nominal_level: f64,
    pub corrected: bool,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Assembles [L − correction, U + correction] (or the uncorrected [L, U]).
pub fn confidence_interval(
    lower: f64,
    upper: f64,
    correction: f64,
    alpha: f64,
    corrected: bool,
) -> Result<ConfidenceInterval> {
    if lower > upper + 1e-9 {
        return Err(OpeError::Internal(format!(
            "lower estimate {lower} exceeds upper estimate {upper}"
        )));
    }
    if correction < 0.0 {
        return Err(OpeError::InvalidInput("correction must be nonnegative".into()));
    }
    let lower = lower.min(upper);
    let (lo, hi) = if corrected {
        (lower - correction, upper + correction)
    } else {
        (lower, upper)
    };
    Ok(ConfidenceInterval {
        lower: lo,
        upper: hi,
        correction,
        nominal_level: 1.0 - alpha,
        corrected,
    })
}

/// Upper bound on the interval length: 2 d_0ᵀ (I − γ P_μ̂)⁻¹ ε with
/// ε_s = γ ρ_s · max_{|v|≤M} ‖β_s v‖_Lip over the support of μ̂_s. The inner
/// maximum has a closed form per support pair: (β(ã)+β(a))·M/c across
/// distinct next states, |β(ã)−β(a)|·M/c at equal next states.
pub fn interval_length_bound(
    emp: &EmpiricalConditional,
    beta: &ImportanceRatio,
    schedule: &RadiusSchedule,
    gamma: f64,
    value_bound: f64,
    initial_dist: &[f64],
    cost: &CostMetric,
) -> Result<f64> {
    emp.require_full_coverage()?;
    let n = emp.n_states;
    let mut eps = vec![0.0; n];
    for s in 0..n {
        let mut worst: f64 = 0.0;
        for atom in &emp.states[s].atoms {
            let z = cost.point(atom.action, atom.next_state);
            let b_a = beta.beta(s, atom.action);
            for zt in 0..cost.n_points() {
                if zt == z {
                    continue;
                }
                let (a_t, s_t) = (zt / n, zt % n);
                let c = cost.cost(zt, z);
                let numer = if s_t != atom.next_state {
                    (beta.beta(s, a_t) + b_a) * value_bound
                } else {
                    (beta.beta(s, a_t) - b_a).abs() * value_bound
                };
                let slope = if c > 0.0 {
                    numer / c
                } else if numer > 0.0 {
                    f64::INFINITY
                } else {
                    continue;
                };
                worst = worst.max(slope);
            }
        }
        eps[s] = gamma * schedule.rho[s] * worst;
    }
    let p = plug_in_transition(emp, beta)?;
    let x = resolvent_solve(&p, &eps, gamma)?;
    Ok(2.0 * initial_dist.iter().zip(&x).map(|(d, v)| d * v).sum::<f64>())
}

/// The machine-readable estimate record emitted by the CLI; serialized as a
/// JSON object. `lambda` entries are null where the dual is unconstrained
/// (radius zero).
#[derive(Debug, Clone, Serialize)]
pub struct EstimateRecord {
    pub env: String,
    pub gamma: f64,
    pub alpha: f64,
    pub lower: f64,
    pub upper: f64,
    pub plug_in: Option<f64>,
    pub ci: ConfidenceInterval,
    pub rho: Vec<f64>,
    pub lambda_lower: Vec<f64>,
    pub lambda_upper: Vec<f64>,
    pub iterations_lower: usize,
    pub iterations_upper: usize,
    pub diagnostics: ContractionReport,
    pub notes: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::empirical::{build_empirical, EmpiricalConditional, StateConditional};
    use crate::empirical::Atom;
    use crate::mdp::{exact_policy_value, importance_ratios, FiniteMdp};
    use crate::trajectory::simulate;

    fn small_mdp() -> FiniteMdp {
        FiniteMdp::new(
            3,
            2,
            vec![
                0.2, 0.5, 0.3, 0.6, 0.1, 0.3, //
                0.1, 0.8, 0.1, 0.3, 0.3, 0.4, //
                0.5, 0.25, 0.25, 0.2, 0.2, 0.6,
            ],
            vec![1.0, 2.0, 0.5, 3.0, 2.5, 0.25],
            0.9,
            vec![0.3, 0.3, 0.4],
        )
        .unwrap()
    }

    #[test]
    fn remark_one_tau_values() {
        // |S| = 10, α = 0.05: τ = log(400)
        let expect = (400.0f64).ln();
        assert!((expect - 5.991464547107982).abs() < 1e-12);
        let states = (0..10)
            .map(|_| StateConditional {
                atoms: vec![Atom { action: 0, next_state: 0, count: 5.0 }],
                n: 5.0,
            })
            .collect();
        let emp = EmpiricalConditional { n_states: 10, n_actions: 2, states };
        let schedule = radius_for_ci(&emp, 0.05, 800.0, 5.0 / 6.0).unwrap();
        for s in 0..10 {
            let tau_s = expect + (2.0 * 5.0 * 800.0f64).ln();
            assert!((schedule.tau[s] - tau_s).abs() < 1e-12);
            let rho = (2.0 * tau_s / 5.0).sqrt() * 5.0 / 6.0;
            assert!((schedule.rho[s] - rho).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_tau_gives_zero_radius() {
        // τ_s = τ + log(2 n_s M) with τ = 0 and n_s·M = 1/2
        let states = vec![StateConditional {
            atoms: vec![Atom { action: 0, next_state: 0, count: 1.0 }],
            n: 1.0,
        }];
        let emp = EmpiricalConditional { n_states: 1, n_actions: 1, states };
        let tau_s = 0.0 + (2.0 * 1.0 * 0.5f64).ln();
        assert_eq!(tau_s, 0.0);
        let schedule = RadiusSchedule::from_taus(&emp, vec![tau_s], 0.5, 1.0).unwrap();
        assert_eq!(schedule.rho[0], 0.0);
    }

    #[test]
    fn schedule_recomputable_from_stored_parameters() {
        let mdp = small_mdp();
        let ds = simulate(&mdp, &Policy::uniform(3, 2), 30, 30, 3, "small").unwrap();
        let emp = build_empirical(&ds, 3, 2).unwrap();
        let schedule = radius_for_ci(&emp, 0.1, 50.0, 0.6).unwrap();
        for s in 0..3 {
            let re = (2.0 * schedule.tau[s] / emp.states[s].n).sqrt() * schedule.diam;
            assert!((re - schedule.rho[s]).abs() < 1e-12);
        }
    }

    fn population_inputs(mdp: &FiniteMdp, target: &Policy, behavior: &Policy) -> (EmpiricalConditional, ImportanceRatio, CostMetric) {
        let emp = EmpiricalConditional::from_population(mdp, behavior).unwrap();
        let beta = importance_ratios(target, behavior).unwrap();
        let cost = CostMetric::paper_default(mdp.n_states(), mdp.n_actions());
        (emp, beta, cost)
    }

    #[test]
    fn zero_radius_on_population_matches_exact_value() {
        let mdp = small_mdp();
        let behavior = Policy::uniform(3, 2);
        let target =
            Policy::from_probs(3, 2, vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5]).unwrap();
        let (emp, beta, cost) = population_inputs(&mdp, &target, &behavior);
        let inputs = EvalInputs {
            target: &target,
            beta: &beta,
            rewards: mdp.rewards(),
            emp: &emp,
            cost: &cost,
            gamma: mdp.discount(),
            initial_dist: mdp.initial_dist(),
        };
        let schedule = RadiusSchedule::fixed(vec![0.0; 3]);
        let exact = exact_policy_value(&mdp, &target).unwrap();
        let lower = robust_value_iteration(&inputs, &schedule, &Default::default()).unwrap();
        let upper = optimistic_value_iteration(&inputs, &schedule, &Default::default()).unwrap();
        let plug = inputs.plug_in_value().unwrap();
        assert!((lower.bound - exact).abs() < 1e-8, "{} vs {exact}", lower.bound);
        assert!((upper.bound - exact).abs() < 1e-8);
        assert!((plug - exact).abs() < 1e-8);
        assert!(lower.lambda.iter().all(|l| l.is_infinite()));
    }

    #[test]
    fn zero_rewards_give_zero_bound_for_any_radius() {
        let mdp = FiniteMdp::new(
            2,
            1,
            vec![0.5, 0.5, 0.5, 0.5],
            vec![0.0, 0.0],
            0.9,
            vec![1.0, 0.0],
        )
        .unwrap();
        let behavior = Policy::uniform(2, 1);
        let (emp, beta, cost) = population_inputs(&mdp, &behavior, &behavior);
        let inputs = EvalInputs {
            target: &behavior,
            beta: &beta,
            rewards: mdp.rewards(),
            emp: &emp,
            cost: &cost,
            gamma: 0.9,
            initial_dist: mdp.initial_dist(),
        };
        for rho in [0.0, 0.1, 1.0] {
            let schedule = RadiusSchedule::fixed(vec![rho; 2]);
            let est = robust_value_iteration(&inputs, &schedule, &Default::default()).unwrap();
            assert!(est.bound.abs() < 1e-12);
        }
    }

    #[test]
    fn estimator_ordering_on_sampled_data() {
        let mdp = small_mdp();
        let behavior = Policy::uniform(3, 2);
        let ds = simulate(&mdp, &behavior, 50, 40, 7, "small").unwrap();
        let emp = build_empirical(&ds, 3, 2).unwrap();
        let cost = CostMetric::paper_default(3, 2);

        // on-policy at the asymptotic schedule: both recursions contract for
        // any radius (β ≡ 1 keeps every worst-case row sum at 1)
        let beta_on = importance_ratios(&behavior, &behavior).unwrap();
        let on = EvalInputs {
            target: &behavior,
            beta: &beta_on,
            rewards: mdp.rewards(),
            emp: &emp,
            cost: &cost,
            gamma: mdp.discount(),
            initial_dist: mdp.initial_dist(),
        };
        let m = default_value_bound(on.max_reward(), 0.9);
        let schedule = radius_for_ci(&emp, 0.05, m, cost.diam()).unwrap();
        let lower = robust_value_iteration(&on, &schedule, &Default::default()).unwrap();
        let upper = optimistic_value_iteration(&on, &schedule, &Default::default()).unwrap();
        let plug = on.plug_in_value().unwrap();
        assert!(lower.bound <= plug + 1e-8);
        assert!(plug <= upper.bound + 1e-8);

        // off-policy at radii inside the contraction regime
        let target = Policy::from_probs(3, 2, vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5]).unwrap();
        let beta = importance_ratios(&target, &behavior).unwrap();
        let off = EvalInputs {
            target: &target,
            beta: &beta,
            ..on
        };
        let plug_off = off.plug_in_value().unwrap();
        let mut prev_l = f64::INFINITY;
        let mut prev_u = f64::NEG_INFINITY;
        for k in 0..5 {
            let rho = 0.01 * k as f64 / 4.0;
            let sched = RadiusSchedule::fixed(vec![rho; 3]);
            let l = robust_value_iteration(&off, &sched, &Default::default()).unwrap();
            let u = optimistic_value_iteration(&off, &sched, &Default::default()).unwrap();
            assert!(l.bound <= plug_off + 1e-8);
            assert!(u.bound >= plug_off - 1e-8);
            assert!(l.bound <= prev_l + 1e-9, "k={k}: {} > {prev_l}", l.bound);
            assert!(u.bound >= prev_u - 1e-9, "k={k}: {} < {prev_u}", u.bound);
            prev_l = l.bound;
            prev_u = u.bound;
        }
    }

    #[test]
    fn divergent_optimistic_regime_is_reported() {
        // off-policy with radii far outside the contraction premise: the
        // optimistic recursion expands and must fail loudly, not return junk
        let mdp = small_mdp();
        let behavior = Policy::uniform(3, 2);
        let target = Policy::greedy(2, &[0, 1, 0]).unwrap();
        let ds = simulate(&mdp, &behavior, 50, 40, 7, "small").unwrap();
        let emp = build_empirical(&ds, 3, 2).unwrap();
        let beta = importance_ratios(&target, &behavior).unwrap();
        let cost = CostMetric::paper_default(3, 2);
        let inputs = EvalInputs {
            target: &target,
            beta: &beta,
            rewards: mdp.rewards(),
            emp: &emp,
            cost: &cost,
            gamma: mdp.discount(),
            initial_dist: mdp.initial_dist(),
        };
        let sched = RadiusSchedule::fixed(vec![cost.diam(); 3]);
        match optimistic_value_iteration(&inputs, &sched, &Default::default()) {
            Err(OpeError::NoConvergence { .. }) => {}
            other => panic!("expected divergence error, got {other:?}"),
        }
    }

    #[test]
    fn converged_value_satisfies_fixed_point() {
        let mdp = small_mdp();
        let behavior = Policy::uniform(3, 2);
        let (emp, beta, cost) = population_inputs(&mdp, &behavior, &behavior);
        let inputs = EvalInputs {
            target: &behavior,
            beta: &beta,
            rewards: mdp.rewards(),
            emp: &emp,
            cost: &cost,
            gamma: mdp.discount(),
            initial_dist: mdp.initial_dist(),
        };
        let schedule = RadiusSchedule::fixed(vec![0.05; 3]);
        let opts = IterationOptions::default();
        let est = robust_value_iteration(&inputs, &schedule, &opts).unwrap();
        let r_pi = inputs.target_reward();
        for s in 0..3 {
            let atoms = emp.states[s].weighted_points(3);
            let mut f = vec![0.0; cost.n_points()];
            for a in 0..2 {
                for s2 in 0..3 {
                    f[a * 3 + s2] = est.value.0[s2] * beta.beta(s, a);
                }
            }
            let (inner, _) = robust_inner(&f, &atoms, 0.05, &cost).unwrap();
            let rhs = r_pi[s] + 0.9 * inner;
            assert!(
                (est.value.0[s] - rhs).abs() < 10.0 * opts.tol,
                "residual at {s}"
            );
        }
    }

    #[test]
    fn on_policy_diagnostics_margins() {
        let mdp = small_mdp();
        let behavior = Policy::uniform(3, 2);
        let (emp, beta, cost) = population_inputs(&mdp, &behavior, &behavior);
        let schedule = RadiusSchedule::fixed(vec![0.3; 3]);
        let report = contraction_diagnostics(&beta, &emp, &schedule, 0.9, &cost, None);
        let thr = (1.0 - 0.9) / (2.0 * 0.9);
        for d in &report.per_state {
            assert_eq!(d.lipschitz, 0.0);
            assert!((d.margin - (thr - default_epsilon(0.9))).abs() < 1e-15);
            assert!(d.pass);
        }
        assert!(report.min_sample_ratio.is_infinite());
        // zero radii leave margin = threshold − ε
        let report0 = contraction_diagnostics(
            &beta,
            &emp,
            &RadiusSchedule::fixed(vec![0.0; 3]),
            0.9,
            &cost,
            Some(&[0.01, 0.02, 0.03]),
        );
        for (s, d) in report0.per_state.iter().enumerate() {
            assert!((d.margin - (thr - [0.01, 0.02, 0.03][s])).abs() < 1e-15);
        }
    }

    #[test]
    fn diagnostics_margins_match_direct_formula() {
        let mdp = small_mdp();
        let behavior = Policy::uniform(3, 2);
        let target = Policy::from_probs(3, 2, vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5]).unwrap();
        let ds = simulate(&mdp, &behavior, 40, 40, 7, "small").unwrap();
        let emp = build_empirical(&ds, 3, 2).unwrap();
        let beta = importance_ratios(&target, &behavior).unwrap();
        let cost = CostMetric::paper_default(3, 2);
        let schedule = radius_for_ci(&emp, 0.05, 100.0, cost.diam()).unwrap();
        let report = contraction_diagnostics(&beta, &emp, &schedule, 0.9, &cost, None);
        for (s, d) in report.per_state.iter().enumerate() {
            let f = beta_point_function(&beta, s, 3);
            let support: Vec<usize> = emp.states[s]
                .atoms
                .iter()
                .map(|a| cost.point(a.action, a.next_state))
                .collect();
            let lip = lipschitz_norm(&f, &support, &cost).unwrap();
            let margin =
                (1.0 - 0.9) / (2.0 * 0.9) - default_epsilon(0.9) - schedule.rho[s] * lip;
            assert!((d.margin - margin).abs() < 1e-12, "state {s}");
        }
    }

    #[test]
    fn correction_on_policy_equal_counts_closed_form() {
        // β ≡ 1 with equal n_s: (I − γP)⁻¹ 1 = 1/(1−γ); correction = 6/((1−γ) n)
        let n_per_state = 50.0;
        let states = (0..4)
            .map(|s| StateConditional {
                atoms: vec![
                    Atom { action: 0, next_state: (s + 1) % 4, count: 30.0 },
                    Atom { action: 0, next_state: s, count: 20.0 },
                ],
                n: n_per_state,
            })
            .collect();
        let emp = EmpiricalConditional { n_states: 4, n_actions: 1, states };
        let beta = ImportanceRatio::on_policy(4, 1);
        let d0 = vec![0.25; 4];
        let gamma = 0.9;
        let correction = correction_term(&emp, &beta, gamma, &d0).unwrap();
        let closed = 6.0 / ((1.0 - gamma) * n_per_state);
        assert!((correction - closed).abs() < 1e-10, "{correction} vs {closed}");
    }

    #[test]
    fn correction_vanishes_with_huge_counts() {
        let states = (0..2)
            .map(|s| StateConditional {
                atoms: vec![Atom { action: 0, next_state: 1 - s, count: 1e9 }],
                n: 1e9,
            })
            .collect();
        let emp = EmpiricalConditional { n_states: 2, n_actions: 1, states };
        let beta = ImportanceRatio::on_policy(2, 1);
        let c = correction_term(&emp, &beta, 0.9, &[0.5, 0.5]).unwrap();
        assert!(c < 1e-7);
    }

    #[test]
    fn correction_matches_truncated_neumann_series() {
        let mdp = small_mdp();
        let behavior = Policy::uniform(3, 2);
        let ds = simulate(&mdp, &behavior, 30, 30, 7, "small").unwrap();
        let emp = build_empirical(&ds, 3, 2).unwrap();
        let beta = ImportanceRatio::on_policy(3, 2);
        let gamma = 0.9;
        let d0 = mdp.initial_dist();
        let correction = correction_term(&emp, &beta, gamma, d0).unwrap();
        // Oracle: Σ_{k≤200} γ^k d_0ᵀ P^k ε
        let p = plug_in_transition(&emp, &beta).unwrap();
        let eps: Vec<f64> = emp.states.iter().map(|st| 6.0 / st.n).collect();
        let mut left = d0.to_vec();
        let mut oracle = 0.0;
        let mut tail_weight = 1.0;
        for _ in 0..=200 {
            oracle += tail_weight * left.iter().zip(&eps).map(|(l, e)| l * e).sum::<f64>();
            let mut next = vec![0.0; 3];
            for s in 0..3 {
                for s2 in 0..3 {
                    next[s2] += left[s] * p.entry(s, s2);
                }
            }
            left = next;
            tail_weight *= gamma;
        }
        let eps_max = eps.iter().cloned().fold(0.0, f64::max);
        let tail_bound = tail_weight * eps_max / (1.0 - gamma) + 1e-12;
        assert!(
            (correction - oracle).abs() <= tail_bound,
            "{correction} vs {oracle} (allow {tail_bound})"
        );
    }

    #[test]
    fn confidence_interval_assembly() {
        let ci = confidence_interval(1.0, 2.0, 0.0, 0.05, true).unwrap();
        assert_eq!((ci.lower, ci.upper), (1.0, 2.0));
        let ci = confidence_interval(1.5, 1.5, 0.25, 0.05, true).unwrap();
        assert_eq!((ci.lower, ci.upper), (1.25, 1.75));
        assert!((ci.width() - 0.5).abs() < 1e-15);
        let ci = confidence_interval(1.0, 2.0, 0.25, 0.05, false).unwrap();
        assert_eq!((ci.lower, ci.upper), (1.0, 2.0));
        assert!(confidence_interval(2.0, 1.0, 0.0, 0.05, true).is_err());
    }

    #[test]
    fn interval_length_bound_trivial_and_dominating() {
        let mdp = small_mdp();
        let behavior = Policy::uniform(3, 2);
        let target = Policy::from_probs(3, 2, vec![0.7, 0.3, 0.2, 0.8, 0.5, 0.5]).unwrap();
        let ds = simulate(&mdp, &behavior, 60, 40, 5, "small").unwrap();
        let emp = build_empirical(&ds, 3, 2).unwrap();
        let beta = importance_ratios(&target, &behavior).unwrap();
        let cost = CostMetric::paper_default(3, 2);
        let d0 = mdp.initial_dist();
        let zero = RadiusSchedule::fixed(vec![0.0; 3]);
        assert_eq!(
            interval_length_bound(&emp, &beta, &zero, 0.9, 10.0, d0, &cost).unwrap(),
            0.0
        );
        let sched = RadiusSchedule::fixed(vec![0.02; 3]);
        assert_eq!(
            interval_length_bound(&emp, &beta, &sched, 0.9, 0.0, d0, &cost).unwrap(),
            0.0
        );
        // actual width is dominated by the bound
        let m = default_value_bound(mdp.max_reward(), 0.9);
        let inputs = EvalInputs {
            target: &target,
            beta: &beta,
            rewards: mdp.rewards(),
            emp: &emp,
            cost: &cost,
            gamma: 0.9,
            initial_dist: d0,
        };
        let lower = robust_value_iteration(&inputs, &sched, &Default::default()).unwrap();
        let upper = optimistic_value_iteration(&inputs, &sched, &Default::default()).unwrap();
        let bound = interval_length_bound(&emp, &beta, &sched, 0.9, m, d0, &cost).unwrap();
        assert!(
            upper.bound - lower.bound <= bound + 1e-9,
            "width {} vs bound {bound}",
            upper.bound - lower.bound
        );
    }

    #[test]
    fn missing_state_bound_mode_substitutes_directionally() {
        let states = vec![
            StateConditional {
                atoms: vec![Atom { action: 0, next_state: 0, count: 5.0 }],
                n: 5.0,
            },
            StateConditional { atoms: vec![], n: 0.0 },
        ];
        let emp = EmpiricalConditional { n_states: 2, n_actions: 1, states };
        let beta = ImportanceRatio::on_policy(2, 1);
        let target = Policy::uniform(2, 1);
        let cost = CostMetric::paper_default(2, 1);
        let rewards = vec![1.0, 1.0];
        let inputs = EvalInputs {
            target: &target,
            beta: &beta,
            rewards: &rewards,
            emp: &emp,
            cost: &cost,
            gamma: 0.5,
            initial_dist: &[0.5, 0.5],
        };
        let schedule = RadiusSchedule::fixed(vec![0.0; 2]);
        assert!(matches!(
            robust_value_iteration(&inputs, &schedule, &Default::default()),
            Err(OpeError::UncoveredStates { .. })
        ));
        let opts = IterationOptions {
            missing_state: MissingState::Bound,
            value_bound: Some(4.0),
            ..Default::default()
        };
        let lo = robust_value_iteration(&inputs, &schedule, &opts).unwrap();
        let hi = optimistic_value_iteration(&inputs, &schedule, &opts).unwrap();
        // state 1: v = r + γ·0 = 1 (lower), r + γ·M = 3 (upper);
        // state 0 self-loops: v = 1/(1−γ) = 2 in both.
        assert!((lo.value.0[1] - 1.0).abs() < 1e-9);
        assert!((hi.value.0[1] - 3.0).abs() < 1e-9);
        assert!((lo.value.0[0] - 2.0).abs() < 1e-9);
        assert!(lo.bound <= hi.bound);
    }
}
