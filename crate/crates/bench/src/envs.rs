//! The two benchmark environments and their perturbed data-collection
//! variants.

use std::str::FromStr;

use robust_ope::error::{OpeError, Result};
use robust_ope::mdp::FiniteMdp;
use robust_ope::wdro::CostMetric;
use serde::{Deserialize, Serialize};

pub const DEFAULT_GAMMA: f64 = 0.95;

/// Benchmark environment identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    Mrp,
    Hmp,
}

impl EnvId {
    pub fn n_states(self) -> usize {
        match self {
            EnvId::Mrp => 10,
            EnvId::Hmp => 6,
        }
    }

    pub fn n_actions(self) -> usize {
        match self {
            EnvId::Mrp => 2,
            EnvId::Hmp => 3,
        }
    }
}

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvId::Mrp => "mrp",
            EnvId::Hmp => "hmp",
        })
    }
}

/// An environment reference including whether the perturbed data-collection
/// variant is meant. Parsed from strings such as `mrp` or `hmp-perturbed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvRef {
    pub id: EnvId,
    pub perturbed: bool,
}

impl EnvRef {
    pub fn base(id: EnvId) -> Self {
        Self {
            id,
            perturbed: false,
        }
    }

    pub fn build(self, gamma: f64) -> Result<FiniteMdp> {
        let base = match self.id {
            EnvId::Mrp => machine_replacement_with(gamma)?,
            EnvId::Hmp => healthcare_management_with(gamma)?,
        };
        if self.perturbed {
            perturbed_variant(self.id, gamma)
        } else {
            Ok(base)
        }
    }
}

impl std::fmt::Display for EnvRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.perturbed {
            write!(f, "{}-perturbed", self.id)
        } else {
            write!(f, "{}", self.id)
        }
    }
}

impl FromStr for EnvRef {
    type Err = OpeError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, perturbed) = match s.strip_suffix("-perturbed") {
            Some(base) => (base, true),
            None => (s, false),
        };
        let id = match name {
            "mrp" => EnvId::Mrp,
            "hmp" => EnvId::Hmp,
            other => {
                return Err(OpeError::InvalidInput(format!(
                    "unknown environment `{other}` (expected mrp or hmp)"
                )))
            }
        };
        Ok(EnvRef { id, perturbed })
    }
}

/// Machine replacement: 10 states (deterioration S1..S8, repair R1, R2) and
/// 2 actions (0 = Repair, 1 = Do Nothing). Rewards attach to states: 20 at
/// S1..S7, 0 at S8, 18 at R1, 10 at R2. The repair rows at R1/R2 copy the
/// Do Nothing rows (the standard account of this benchmark leaves them open), and the
/// initial distribution is uniform over all states (a choice fixed here).
pub fn machine_replacement() -> FiniteMdp {
    machine_replacement_with(DEFAULT_GAMMA).expect("default machine replacement is valid")
}

pub fn machine_replacement_with(gamma: f64) -> Result<FiniteMdp> {
    machine_replacement_params(gamma, 0.2, 0.8)
}

fn machine_replacement_params(gamma: f64, p: f64, q: f64) -> Result<FiniteMdp> {
    const N: usize = 10;
    const REPAIR: usize = 0;
    const DO_NOTHING: usize = 1;
    const R1: usize = 8;
    const R2: usize = 9;
    let mut t = vec![0.0; N * 2 * N];
    let at = |s: usize, a: usize, s2: usize| (s * 2 + a) * N + s2;
    // Do Nothing: S_i lingers with p, deteriorates with q; S8 and R1 absorb;
    // R2 lingers with p and releases to S1 with q.
    for i in 0..7 {
        t[at(i, DO_NOTHING, i)] = p;
        t[at(i, DO_NOTHING, i + 1)] = q;
    }
    t[at(7, DO_NOTHING, 7)] = 1.0;
    t[at(R1, DO_NOTHING, R1)] = 1.0;
    t[at(R2, DO_NOTHING, R2)] = p;
    t[at(R2, DO_NOTHING, 0)] = q;
    // Repair from S_i: normal repair 0.1, long repair 0.6, slip onward 0.3.
    for i in 0..8 {
        t[at(i, REPAIR, R1)] = 0.1;
        t[at(i, REPAIR, R2)] = 0.6;
        t[at(i, REPAIR, (i + 1).min(7))] += 0.3;
    }
    // Repair at the repair states copies Do Nothing.
    for s in [R1, R2] {
        for s2 in 0..N {
            t[(s * 2 + REPAIR) * N + s2] = t[(s * 2 + DO_NOTHING) * N + s2];
        }
    }
    let mut rewards = vec![0.0; N * 2];
    for s in 0..N {
        let r = match s {
            0..=6 => 20.0,
            7 => 0.0,
            R1 => 18.0,
            _ => 10.0,
        };
        rewards[s * 2] = r;
        rewards[s * 2 + 1] = r;
    }
    FiniteMdp::new(N, 2, t, rewards, gamma, vec![0.1; N])
}

/// Healthcare management: 6 states (condition 1..5 plus the absorbing
/// mortality state) and 3 actions (0 = do nothing, 1 = low drug level,
/// 2 = high drug level) with rewards 10/6/2 at the live states and 0 at the
/// mortality state. The initial distribution is uniform over the live
/// states (the standard account leaves it open).
pub fn healthcare_management() -> FiniteMdp {
    healthcare_management_with(DEFAULT_GAMMA).expect("default healthcare management is valid")
}

pub fn healthcare_management_with(gamma: f64) -> Result<FiniteMdp> {
    healthcare_management_params(gamma, 0.0, None)
}

fn healthcare_management_params(
    gamma: f64,
    shift: f64,
    mortality_escape: Option<(f64, f64)>,
) -> Result<FiniteMdp> {
    const N: usize = 6;
    const MORTALITY: usize = 5;
    // (stay, worsen, improve) per action; `shift` moves mass from improve to
    // stay for the perturbed data-collection variant.
    let base = [[0.4, 0.3, 0.3], [0.4, 0.2, 0.4], [0.4, 0.1, 0.5]];
    let mut t = vec![0.0; N * 3 * N];
    let mut rewards = vec![0.0; N * 3];
    for i in 0..5 {
        for a in 0..3 {
            let [p1, p2, p3] = base[a];
            let (p1, p3) = (p1 + shift, p3 - shift);
            t[(i * 3 + a) * N + i] += p1;
            t[(i * 3 + a) * N + (i + 1)] += p2;
            t[(i * 3 + a) * N + i.saturating_sub(1)] += p3;
            rewards[i * 3 + a] = [10.0, 6.0, 2.0][a];
        }
    }
    for a in 0..3 {
        t[(MORTALITY * 3 + a) * N + MORTALITY] = 1.0;
    }
    if let Some((escape, stay)) = mortality_escape {
        t[(MORTALITY * 3 + 2) * N + MORTALITY] = stay;
        t[(MORTALITY * 3 + 2) * N + 4] = escape;
    }
    let mut d0 = vec![0.2; N];
    d0[MORTALITY] = 0.0;
    FiniteMdp::new(N, 3, t, rewards, gamma, d0)
}

/// The data-collection-phase variants: the machine lingers more
/// (p' = p + 0.1, q' = q − 0.1); patients stabilize more and improve less
/// (p1' = p1 + 0.05, p3' = p3 − 0.05), and the high drug level occasionally
/// revives from the mortality state (to S5 with 0.05, stay 0.95).
pub fn perturbed_variant(env: EnvId, gamma: f64) -> Result<FiniteMdp> {
    match env {
        EnvId::Mrp => machine_replacement_params(gamma, 0.3, 0.7),
        EnvId::Hmp => healthcare_management_params(gamma, 0.05, Some((0.05, 0.95))),
    }
}

/// The default ground metric for an environment.
pub fn default_cost(env: EnvId) -> CostMetric {
    CostMetric::paper_default(env.n_states(), env.n_actions())
}
