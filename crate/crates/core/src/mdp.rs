//! Finite-MDP data model and exact (model-known) solvers.
//!
//! Everything here assumes the transition kernel is known; the estimators in
//! the rest of the crate only use these routines to produce ground truth,
//! reference policies, and oracle values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};

/// Tolerance for probability-vector validation.
const PROB_TOL: f64 = 1e-12;

/// Default sup-norm stopping tolerance for value iteration.
pub const DEFAULT_VI_TOL: f64 = 1e-10;

/// Sweep cap for value iteration; exceeding it is reported as an error.
pub const MAX_VI_SWEEPS: usize = 1_000_000;

/// A finite discounted MDP: tabular transitions, a reward table with
/// nonnegative entries, a discount in (0,1), and an initial state
/// distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[state][action][next_state]`.
    transitions: Vec<f64>,
    /// Row-major `[state][action]`.
    rewards: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        discount: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(OpeError::InvalidInput(
                "state and action spaces must be nonempty".into(),
            ));
        }
        if transitions.len() != n_states * n_actions * n_states {
            return Err(OpeError::DimensionMismatch(format!(
                "transition tensor has {} entries, expected {}",
                transitions.len(),
                n_states * n_actions * n_states
            )));
        }
        if rewards.len() != n_states * n_actions {
            return Err(OpeError::DimensionMismatch(format!(
                "reward table has {} entries, expected {}",
                rewards.len(),
                n_states * n_actions
            )));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(OpeError::InvalidInput(format!(
                "discount must lie in (0,1), got {discount}"
            )));
        }
        for (s, a) in (0..n_states).flat_map(|s| (0..n_actions).map(move |a| (s, a))) {
            let row = &transitions[(s * n_actions + a) * n_states..][..n_states];
            validate_prob_vector(row, PROB_TOL)
                .map_err(|m| OpeError::InvalidInput(format!("transitions[{s}][{a}]: {m}")))?;
            if rewards[s * n_actions + a] < 0.0 {
                return Err(OpeError::InvalidInput(format!(
                    "reward at ({s},{a}) is negative"
                )));
            }
        }
        if initial_dist.len() != n_states {
            return Err(OpeError::DimensionMismatch(format!(
                "initial distribution has {} entries, expected {n_states}",
                initial_dist.len()
            )));
        }
        validate_prob_vector(&initial_dist, PROB_TOL)
            .map_err(|m| OpeError::InvalidInput(format!("initial distribution: {m}")))?;
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            discount,
            initial_dist,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    /// P(s' | s, a)
    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + s_next]
    }

    /// The transition row P(· | s, a).
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        &self.transitions[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    /// r(s, a)
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    /// The reward table, row-major `[state][action]`.
    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn max_reward(&self) -> f64 {
        self.rewards.iter().cloned().fold(0.0, f64::max)
    }

    /// State transition matrix under a policy: P_π(s,s') = Σ_a π(a|s) P(s'|s,a).
    pub fn policy_transition(&self, policy: &Policy) -> Result<Vec<f64>> {
        self.check_policy_dims(policy)?;
        let n = self.n_states;
        let mut out = vec![0.0; n * n];
        for s in 0..n {
            for a in 0..self.n_actions {
                let w = policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                let row = self.row(s, a);
                for s2 in 0..n {
                    out[s * n + s2] += w * row[s2];
                }
            }
        }
        Ok(out)
    }

    /// Expected one-step reward under a policy: r_π(s) = Σ_a π(a|s) r(s,a).
    pub fn policy_reward(&self, policy: &Policy) -> Result<Vec<f64>> {
        self.check_policy_dims(policy)?;
        Ok((0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| policy.prob(s, a) * self.r(s, a))
                    .sum()
            })
            .collect())
    }

    fn check_policy_dims(&self, policy: &Policy) -> Result<()> {
        if policy.n_states() != self.n_states || policy.n_actions() != self.n_actions {
            return Err(OpeError::DimensionMismatch(format!(
                "policy is {}x{}, MDP is {}x{}",
                policy.n_states(),
                policy.n_actions(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }
}

fn validate_prob_vector(v: &[f64], tol: f64) -> std::result::Result<(), String> {
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() || x < 0.0 {
            return Err(format!("entry {i} is {x}"));
        }
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(format!("sums to {sum}, expected 1 within {tol:e}"));
    }
    Ok(())
}

/// A stochastic policy: one probability row per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[state][action]`.
    probs: Vec<f64>,
    deterministic: bool,
}

impl Policy {
    pub fn from_probs(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(OpeError::DimensionMismatch(format!(
                "policy table has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for s in 0..n_states {
            validate_prob_vector(&probs[s * n_actions..][..n_actions], PROB_TOL)
                .map_err(|m| OpeError::InvalidInput(format!("policy row {s}: {m}")))?;
        }
        let deterministic = (0..n_states)
            .all(|s| (0..n_actions).any(|a| probs[s * n_actions + a] == 1.0));
        Ok(Self {
            n_states,
            n_actions,
            probs,
            deterministic,
        })
    }

    /// Deterministic policy from one action index per state.
    pub fn greedy(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(OpeError::InvalidInput(format!(
                    "action {a} out of range at state {s}"
                )));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Self::from_probs(n_states, n_actions, probs)
    }

    /// Uniform policy over all actions.
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self::from_probs(n_states, n_actions, vec![p; n_states * n_actions])
            .expect("uniform rows are valid")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    /// The chosen action per state for a deterministic policy.
    pub fn actions(&self) -> Option<Vec<usize>> {
        if !self.deterministic {
            return None;
        }
        Some(
            (0..self.n_states)
                .map(|s| (0..self.n_actions).find(|&a| self.prob(s, a) == 1.0).unwrap())
                .collect(),
        )
    }
}

/// Per-state action importance ratios between a target and behavior policy,
/// together with the per-state span of the ratios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceRatio {
    n_states: usize,
    n_actions: usize,
    /// Row-major `[state][action]`.
    beta: Vec<f64>,
    /// Per-state span: max_a β_s(a) − min_a β_s(a).
    span: Vec<f64>,
}

impl ImportanceRatio {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn beta(&self, s: usize, a: usize) -> f64 {
        self.beta[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.beta[s * self.n_actions..][..self.n_actions]
    }

    pub fn span(&self, s: usize) -> f64 {
        self.span[s]
    }

    /// Ratios for an on-policy pair (β ≡ 1).
    pub fn on_policy(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            beta: vec![1.0; n_states * n_actions],
            span: vec![0.0; n_states],
        }
    }

    /// Ratios for a candidate deterministic action against a behavior policy:
    /// β(a) = 1{a = chosen}/π_b(chosen|s). Used by batch policy optimization.
    pub fn for_deterministic_action(
        behavior: &Policy,
        s: usize,
        chosen: usize,
    ) -> Result<Vec<f64>> {
        let pb = behavior.prob(s, chosen);
        if pb <= 0.0 {
            return Err(OpeError::SupportViolation {
                pairs: vec![(s, chosen)],
            });
        }
        let mut row = vec![0.0; behavior.n_actions()];
        row[chosen] = 1.0 / pb;
        Ok(row)
    }
}

/// Elementwise ratios β_s(a) = π(a|s)/π_b(a|s), validating that the behavior
/// policy supports the target everywhere.
pub fn importance_ratios(target: &Policy, behavior: &Policy) -> Result<ImportanceRatio> {
    if target.n_states() != behavior.n_states() || target.n_actions() != behavior.n_actions() {
        return Err(OpeError::DimensionMismatch(format!(
            "target is {}x{}, behavior is {}x{}",
            target.n_states(),
            target.n_actions(),
            behavior.n_states(),
            behavior.n_actions()
        )));
    }
    let (n_states, n_actions) = (target.n_states(), target.n_actions());
    let mut beta = vec![0.0; n_states * n_actions];
    let mut violations = Vec::new();
    for s in 0..n_states {
        for a in 0..n_actions {
            let (pt, pb) = (target.prob(s, a), behavior.prob(s, a));
            if pb > 0.0 {
                beta[s * n_actions + a] = pt / pb;
            } else if pt > 0.0 {
                violations.push((s, a));
            }
            // pt == 0 and pb == 0: ratio set to 0
        }
    }
    if !violations.is_empty() {
        return Err(OpeError::SupportViolation { pairs: violations });
    }
    let span = (0..n_states)
        .map(|s| {
            let row = &beta[s * n_actions..][..n_actions];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            max - min
        })
        .collect();
    Ok(ImportanceRatio {
        n_states,
        n_actions,
        beta,
        span,
    })
}

/// A state value function.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueFunction(pub Vec<f64>);

impl ValueFunction {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// A discounted average visitation distribution over states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisitationDistribution(pub Vec<f64>);

impl VisitationDistribution {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Solves the discounted occupancy system
/// d_π = (1−γ) d_0 + γ P_πᵀ d_π.
pub fn exact_average_visitation(mdp: &FiniteMdp, policy: &Policy) -> Result<VisitationDistribution> {
    let n = mdp.n_states();
    let p_pi = mdp.policy_transition(policy)?;
    let gamma = mdp.discount();
    // (I − γ P_πᵀ) d = (1−γ) d_0
    let mut a = DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        for s2 in 0..n {
            a[(s2, s)] -= gamma * p_pi[s * n + s2];
        }
    }
    let b = DVector::from_iterator(n, mdp.initial_dist().iter().map(|&x| (1.0 - gamma) * x));
    let d = a
        .lu()
        .solve(&b)
        .ok_or_else(|| OpeError::Internal("occupancy system is singular".into()))?;
    let mut out: Vec<f64> = d.iter().cloned().collect();
    for x in &mut out {
        if *x < 0.0 {
            if *x < -1e-10 {
                return Err(OpeError::Internal(format!(
                    "occupancy solve produced negative mass {x}"
                )));
            }
            *x = 0.0;
        }
    }
    let sum: f64 = out.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(OpeError::Internal(format!(
            "occupancy solve sums to {sum}"
        )));
    }
    Ok(VisitationDistribution(out))
}

/// The exact discounted value of a policy on a known MDP:
/// R_π = Σ_{s,a} d_π(s) π(a|s) r(s,a).
pub fn exact_policy_value(mdp: &FiniteMdp, policy: &Policy) -> Result<f64> {
    let d = exact_average_visitation(mdp, policy)?;
    let mut total = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            total += d.0[s] * policy.prob(s, a) * mdp.r(s, a);
        }
    }
    Ok(total)
}

/// Exact value iteration on the known MDP. Returns the deterministic optimal
/// policy (argmax ties broken to the lowest action index) and its exact value.
pub fn optimal_policy(mdp: &FiniteMdp, tol: f64) -> Result<(Policy, f64)> {
    if tol <= 0.0 {
        return Err(OpeError::InvalidInput("tolerance must be positive".into()));
    }
    let (n, m, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    let mut v = vec![0.0; n];
    let mut converged = false;
    for _ in 0..MAX_VI_SWEEPS {
        let mut v_next = vec![0.0; n];
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..m {
                let q = mdp.r(s, a)
                    + gamma
                        * mdp
                            .row(s, a)
                            .iter()
                            .zip(&v)
                            .map(|(p, vs)| p * vs)
                            .sum::<f64>();
                if q > best {
                    best = q;
                }
            }
            v_next[s] = best;
        }
        let delta = v_next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = v_next;
        if delta < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(OpeError::NoConvergence {
            cap: MAX_VI_SWEEPS,
            residual: f64::NAN,
            margins: vec![],
        });
    }
    let mut actions = vec![0usize; n];
    for s in 0..n {
        let mut best = f64::NEG_INFINITY;
        for a in 0..m {
            let q = mdp.r(s, a)
                + gamma
                    * mdp
                        .row(s, a)
                        .iter()
                        .zip(&v)
                        .map(|(p, vs)| p * vs)
                        .sum::<f64>();
            if q > best {
                best = q;
                actions[s] = a;
            }
        }
    }
    let policy = Policy::greedy(m, &actions)?;
    let value = exact_policy_value(mdp, &policy)?;
    Ok((policy, value))
}

/// k synchronous Q-value-iteration sweeps from zero initialization, followed
/// by ε-greedy softening: the greedy action of Q_k gets probability
/// 1 − ε + ε/|A|, every other action ε/|A|. Greedy ties break to the lowest
/// action index; with k = 0 the all-zero Q table makes action 0 greedy
/// everywhere.
pub fn q_iteration_policy(mdp: &FiniteMdp, k: usize, epsilon: f64) -> Result<Policy> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(OpeError::InvalidInput(format!(
            "epsilon must lie in [0,1], got {epsilon}"
        )));
    }
    let (n, m, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    let mut q = vec![0.0; n * m];
    for _ in 0..k {
        let v: Vec<f64> = (0..n)
            .map(|s| {
                (0..m)
                    .map(|a| q[s * m + a])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut q_next = vec![0.0; n * m];
        for s in 0..n {
            for a in 0..m {
                q_next[s * m + a] = mdp.r(s, a)
                    + gamma
                        * mdp
                            .row(s, a)
                            .iter()
                            .zip(&v)
                            .map(|(p, vs)| p * vs)
                            .sum::<f64>();
            }
        }
        q = q_next;
    }
    let base = epsilon / m as f64;
    let mut probs = vec![base; n * m];
    for s in 0..n {
        let mut greedy = 0usize;
        let mut best = f64::NEG_INFINITY;
        for a in 0..m {
            if q[s * m + a] > best {
                best = q[s * m + a];
                greedy = a;
            }
        }
        probs[s * m + greedy] += 1.0 - epsilon;
    }
    Policy::from_probs(n, m, probs)
}
