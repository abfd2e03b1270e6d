//! Experiment configuration: policy specs, grids, seeds, and the JSON
//! config-file override.

use std::path::PathBuf;
use std::str::FromStr;

use robust_ope::error::{OpeError, Result};
use robust_ope::mdp::{optimal_policy, q_iteration_policy, FiniteMdp, Policy};
use serde::{Deserialize, Serialize};

use crate::envs::{EnvId, EnvRef};

/// How to construct a policy on a benchmark environment. Parsed from
/// `uniform`, `optimal`, or `qK:EPS` (K value-iteration sweeps, ε-greedy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PolicySpec {
    Uniform,
    Optimal,
    QIteration { k: usize, epsilon: f64 },
}

impl PolicySpec {
    /// Builds the policy on the given (reference) environment.
    pub fn build(&self, mdp: &FiniteMdp) -> Result<Policy> {
        match *self {
            PolicySpec::Uniform => Ok(Policy::uniform(mdp.n_states(), mdp.n_actions())),
            PolicySpec::Optimal => Ok(optimal_policy(mdp, 1e-10)?.0),
            PolicySpec::QIteration { k, epsilon } => q_iteration_policy(mdp, k, epsilon),
        }
    }
}

impl std::fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PolicySpec::Uniform => f.write_str("uniform"),
            PolicySpec::Optimal => f.write_str("optimal"),
            PolicySpec::QIteration { k, epsilon } => write!(f, "q{k}:{epsilon}"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = OpeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => return Ok(PolicySpec::Uniform),
            "optimal" => return Ok(PolicySpec::Optimal),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix('q') {
            let (k, eps) = rest.split_once(':').ok_or_else(|| {
                OpeError::InvalidInput(format!("bad policy spec `{s}` (expected qK:EPS)"))
            })?;
            let k = k
                .parse()
                .map_err(|_| OpeError::InvalidInput(format!("bad sweep count in `{s}`")))?;
            let epsilon = eps
                .parse()
                .map_err(|_| OpeError::InvalidInput(format!("bad epsilon in `{s}`")))?;
            return Ok(PolicySpec::QIteration { k, epsilon });
        }
        Err(OpeError::InvalidInput(format!(
            "unknown policy spec `{s}` (expected uniform, optimal, or qK:EPS)"
        )))
    }
}

/// The default behavior policy per environment: random actions for the
/// machine, a lightly trained ε-greedy policy for healthcare (a random one
/// starves the upper condition states of data).
pub fn default_behavior(env: EnvId) -> PolicySpec {
    match env {
        EnvId::Mrp => PolicySpec::Uniform,
        EnvId::Hmp => PolicySpec::QIteration { k: 5, epsilon: 0.3 },
    }
}

/// Full configuration of one experiment run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvRef,
    pub behavior: PolicySpec,
    pub target: PolicySpec,
    pub gamma: f64,
    pub alpha: f64,
    pub episodes_grid: Vec<usize>,
    pub horizon_grid: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub corrected: bool,
    /// Per-state radii for the fixed-radius (adversarial) estimators.
    pub radii_file: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(env: EnvRef) -> Self {
        Self {
            env,
            behavior: default_behavior(env.id),
            target: PolicySpec::Optimal,
            gamma: crate::envs::DEFAULT_GAMMA,
            alpha: 0.05,
            episodes_grid: vec![300],
            horizon_grid: vec![300],
            trials: 1,
            seed: 7,
            corrected: true,
            radii_file: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes_grid.is_empty() || self.horizon_grid.is_empty() {
            return Err(OpeError::InvalidInput("grids must be nonempty".into()));
        }
        if self.episodes_grid.iter().chain(&self.horizon_grid).any(|&x| x == 0) {
            return Err(OpeError::InvalidInput("grid entries must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(OpeError::InvalidInput("trial count must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(OpeError::InvalidInput(format!(
                "gamma must lie in (0,1), got {}",
                self.gamma
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(OpeError::InvalidInput(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Optional JSON config file; present fields override flag values.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverride {
    pub env: Option<String>,
    pub behavior: Option<String>,
    pub target: Option<String>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub episodes: Option<Vec<usize>>,
    pub horizon: Option<Vec<usize>>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub corrected: Option<bool>,
    pub radii_file: Option<PathBuf>,
}

impl ConfigOverride {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| OpeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| {
            OpeError::InvalidInput(format!("config file {}: {e}", path.display()))
        })
    }

    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(env) = &self.env {
            cfg.env = env.parse()?;
        }
        if let Some(b) = &self.behavior {
            cfg.behavior = b.parse()?;
        }
        if let Some(t) = &self.target {
            cfg.target = t.parse()?;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(e) = &self.episodes {
            cfg.episodes_grid = e.clone();
        }
        if let Some(h) = &self.horizon {
            cfg.horizon_grid = h.clone();
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(c) = self.corrected {
            cfg.corrected = c;
        }
        if let Some(r) = &self.radii_file {
            cfg.radii_file = Some(r.clone());
        }
        Ok(())
    }
}

/// SplitMix64 step, the documented seed-derivation mixer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-cell, per-trial seed: three SplitMix64 rounds binding
/// the base seed, the grid cell, and the trial index. Identical regardless
/// of scheduling order.
pub fn derive_seed(base: u64, cell: u64, trial: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ cell) ^ trial)
}

/// Loads a per-state radii map `{ "0": rho0, ... }`; every state index must
/// be present exactly once.
pub fn load_radii(path: &std::path::Path, n_states: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|source| OpeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let map: std::collections::BTreeMap<String, f64> = serde_json::from_str(&text)
        .map_err(|e| OpeError::InvalidInput(format!("radii file {}: {e}", path.display())))?;
    let mut rho = vec![f64::NAN; n_states];
    for (key, value) in map {
        let idx: usize = key.parse().map_err(|_| {
            OpeError::InvalidInput(format!("radii file key `{key}` is not a state index"))
        })?;
        if idx >= n_states {
            return Err(OpeError::InvalidInput(format!(
                "radii file key {idx} out of range for {n_states} states"
            )));
        }
        if value < 0.0 || !value.is_finite() {
            return Err(OpeError::InvalidInput(format!(
                "radius for state {idx} must be finite and nonnegative"
            )));
        }
        rho[idx] = value;
    }
    if let Some(missing) = rho.iter().position(|x| x.is_nan()) {
        return Err(OpeError::InvalidInput(format!(
            "radii file is missing state {missing}"
        )));
    }
    Ok(rho)
}

/// Writes a per-state radii map in the format accepted by [`load_radii`].
pub fn save_radii(path: &std::path::Path, rho: &[f64]) -> Result<()> {
    let map: std::collections::BTreeMap<String, f64> = rho
        .iter()
        .enumerate()
        .map(|(i, &r)| (i.to_string(), r))
        .collect();
    let text = serde_json::to_string_pretty(&map)
        .map_err(|e| OpeError::Internal(format!("radii serialization: {e}")))?;
    std::fs::write(path, text).map_err(|source| OpeError::Io {
        path: path.display().to_string(),
        source,
    })
}
