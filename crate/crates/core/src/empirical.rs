//! Per-state empirical conditional action–next-state distributions and the
//! plug-in quantities derived from them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::mdp::{exact_average_visitation, FiniteMdp, ImportanceRatio, Policy};
use crate::trajectory::Dataset;

/// One deduplicated (action, next_state) atom with its count. Counts are
/// integers when built from data; population-built conditionals carry
/// probabilities instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub action: usize,
    pub next_state: usize,
    pub count: f64,
}

/// The conditional distribution at one state: atoms and the local sample
/// count n_s. Atom weights are `count / n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateConditional {
    pub atoms: Vec<Atom>,
    pub n: f64,
}

impl StateConditional {
    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Atoms as (flat point index, weight) pairs, point = action·|S| + next_state.
    pub fn weighted_points(&self, n_states: usize) -> Vec<(usize, f64)> {
        self.atoms
            .iter()
            .map(|a| (a.action * n_states + a.next_state, a.count / self.n))
            .collect()
    }

    /// Empirical action marginal at this state.
    pub fn action_marginal(&self, n_actions: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_actions];
        for a in &self.atoms {
            out[a.action] += a.count / self.n;
        }
        out
    }
}

/// Empirical conditionals for every state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalConditional {
    pub n_states: usize,
    pub n_actions: usize,
    pub states: Vec<StateConditional>,
}

impl EmpiricalConditional {
    /// Total count Σ_s n_s.
    pub fn total(&self) -> f64 {
        self.states.iter().map(|s| s.n).sum()
    }

    /// States with no observed transitions.
    pub fn uncovered_states(&self) -> Vec<usize> {
        self.states
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_empty())
            .map(|(i, _)| i)
            .collect()
    }

    /// Errors if any state is uncovered.
    pub fn require_full_coverage(&self) -> Result<()> {
        let states = self.uncovered_states();
        if states.is_empty() {
            Ok(())
        } else {
            Err(OpeError::UncoveredStates { states })
        }
    }

    /// Empirical state frequencies n_s / Σ n_s.
    pub fn state_frequencies(&self) -> Vec<f64> {
        let total = self.total();
        self.states.iter().map(|s| s.n / total).collect()
    }

    /// The population conditionals of a known MDP under a behavior policy:
    /// atoms weighted by π_b(a|s)·P(s'|s,a), with n_s set to the exact
    /// average visitation mass d_{π_b}(s) so that state frequencies reproduce
    /// d_{π_b} (Σ_s n_s = 1). Intended for reference values; the 1/n_s
    /// correction and radius formulas are not meaningful on these.
    pub fn from_population(mdp: &FiniteMdp, behavior: &Policy) -> Result<Self> {
        let d_b = exact_average_visitation(mdp, behavior)?;
        let states = (0..mdp.n_states())
            .map(|s| {
                let n = d_b.0[s].max(f64::MIN_POSITIVE);
                let mut atoms = Vec::new();
                for a in 0..mdp.n_actions() {
                    let pa = behavior.prob(s, a);
                    if pa == 0.0 {
                        continue;
                    }
                    for s2 in 0..mdp.n_states() {
                        let w = pa * mdp.p(s, a, s2);
                        if w > 0.0 {
                            atoms.push(Atom {
                                action: a,
                                next_state: s2,
                                // joint mass, so count / n is the conditional
                                count: w * n,
                            });
                        }
                    }
                }
                StateConditional { atoms, n }
            })
            .collect();
        Ok(Self {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            states,
        })
    }
}

/// Tallies a dataset into per-state conditionals, deduplicating identical
/// (a, s') pairs into integer counts. Errors when any state has no data.
pub fn build_empirical(ds: &Dataset, n_states: usize, n_actions: usize) -> Result<EmpiricalConditional> {
    let emp = build_empirical_partial(ds, n_states, n_actions)?;
    emp.require_full_coverage()?;
    Ok(emp)
}

/// As [`build_empirical`] but tolerates uncovered states; those entries come
/// back empty and downstream recursions must run in missing-state=bound mode.
pub fn build_empirical_partial(
    ds: &Dataset,
    n_states: usize,
    n_actions: usize,
) -> Result<EmpiricalConditional> {
    let mut tallies: Vec<BTreeMap<(usize, usize), u64>> = vec![BTreeMap::new(); n_states];
    for (j, traj) in ds.trajectories.iter().enumerate() {
        for (t, step) in traj.iter().enumerate() {
            if step.state >= n_states || step.next_state >= n_states || step.action >= n_actions {
                return Err(OpeError::InvalidInput(format!(
                    "trajectory {j} step {t} is out of range for a {n_states}x{n_actions} model"
                )));
            }
            *tallies[step.state]
                .entry((step.action, step.next_state))
                .or_insert(0) += 1;
        }
    }
    let states = tallies
        .into_iter()
        .map(|m| {
            let n: u64 = m.values().sum();
            StateConditional {
                atoms: m
                    .into_iter()
                    .map(|((action, next_state), k)| Atom {
                        action,
                        next_state,
                        count: k as f64,
                    })
                    .collect(),
                n: n as f64,
            }
        })
        .collect();
    Ok(EmpiricalConditional {
        n_states,
        n_actions,
        states,
    })
}

/// The plug-in state-to-state transition induced by reweighting the
/// conditionals with importance ratios. Rows need not sum to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlugInTransition {
    pub n_states: usize,
    /// Row-major matrix, entry (s,s') = Σ_a μ̂(a,s'|s) β_s(a).
    pub matrix: Vec<f64>,
    /// Σ_a μ̂(a|s) β_s(a) per state; the contraction diagnostics read these.
    pub row_sums: Vec<f64>,
}

impl PlugInTransition {
    pub fn entry(&self, s: usize, s2: usize) -> f64 {
        self.matrix[s * self.n_states + s2]
    }
}

/// Builds the plug-in transition matrix P(s,s') = Σ_a μ̂(a,s'|s) β_s(a).
pub fn plug_in_transition(
    emp: &EmpiricalConditional,
    beta: &ImportanceRatio,
) -> Result<PlugInTransition> {
    if beta.n_states() != emp.n_states || beta.n_actions() != emp.n_actions {
        return Err(OpeError::DimensionMismatch(
            "importance ratios do not match the conditionals".into(),
        ));
    }
    let n = emp.n_states;
    let mut matrix = vec![0.0; n * n];
    let mut row_sums = vec![0.0; n];
    for (s, cond) in emp.states.iter().enumerate() {
        if cond.is_empty() {
            continue;
        }
        for atom in &cond.atoms {
            let w = atom.count / cond.n * beta.beta(s, atom.action);
            matrix[s * n + atom.next_state] += w;
            row_sums[s] += w;
        }
    }
    Ok(PlugInTransition {
        n_states: n,
        matrix,
        row_sums,
    })
}

/// The sample-average (radius-zero) value estimate
/// (1−γ) d_0ᵀ (I − γ P_μ̂)⁻¹ r_π. Errors when γ·max row sum ≥ 1, which is a
/// sign of too little data for the plug-in route.
pub fn plug_in_value(
    emp: &EmpiricalConditional,
    beta: &ImportanceRatio,
    rewards_under_target: &[f64],
    initial_dist: &[f64],
    gamma: f64,
) -> Result<f64> {
    emp.require_full_coverage()?;
    let p = plug_in_transition(emp, beta)?;
    let x = resolvent_solve(&p, rewards_under_target, gamma)?;
    Ok((1.0 - gamma)
        * initial_dist
            .iter()
            .zip(&x)
            .map(|(d, v)| d * v)
            .sum::<f64>())
}

/// Solves (I − γP) x = b after checking the row-sum contraction condition.
pub(crate) fn resolvent_solve(p: &PlugInTransition, b: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let worst = p.row_sums.iter().cloned().fold(0.0, f64::max);
    if gamma * worst >= 1.0 {
        return Err(OpeError::SingularSystem(format!(
            "gamma * max plug-in row sum = {:.6} >= 1; collect more data or use the robust estimator",
            gamma * worst
        )));
    }
    let n = p.n_states;
    let mut a = nalgebra::DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        for s2 in 0..n {
            a[(s, s2)] -= gamma * p.entry(s, s2);
        }
    }
    let sol = a
        .lu()
        .solve(&nalgebra::DVector::from_column_slice(b))
        .ok_or_else(|| OpeError::SingularSystem("plug-in resolvent is singular".into()))?;
    Ok(sol.iter().cloned().collect())
}
