//! Exact inner Wasserstein solves on the discrete action–next-state space.
//!
//! The robust inner problem at one state is
//!
//! ```text
//! min { E_μ[f] : W(μ, μ̂) ≤ ρ }
//!   = max_{λ≥0} { −λρ + Σ_i w_i · min_z { f(z) + λ c(z, z_i) } }
//! ```
//!
//! a concave piecewise-linear one-dimensional dual. Each atom contributes the
//! lower envelope of |Z| lines (intercept f(z), slope c(z, z_i)); the dual's
//! kinks are the union of the envelope vertices, so walking each envelope and
//! sweeping the merged kinks by slope gives the exact maximum with no solver
//! dependency. The optimistic problem is the mirror image and is solved as
//! −robust(−f).
//!
//! The worst-case distribution is recovered from λ*: every atom sends its
//! mass to a minimizer of f(z) + λ* c(z, z_i); atoms whose minimizer is tied
//! split mass so the total transport cost hits the complementary-slackness
//! target, which makes the primal value equal the dual value by construction.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};

/// λ* sentinel for the ρ = 0 case, where the dual supremum is approached as
/// λ → ∞ and the inner value is the empirical mean.
pub const LAMBDA_UNCONSTRAINED: f64 = f64::INFINITY;

/// Absolute tolerance for comparing transport costs when detecting ties.
pub const COST_TIE_TOL: f64 = 1e-12;

/// Which ground metric a [`CostMetric`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostKind {
    /// c((a,s),(a',s')) = (|s−s'| + |a−a'|) / (|S| + |A|)
    Default,
    /// Loaded or supplied as an explicit table.
    Custom,
}

/// A validated metric on the flat point space A×S, point = a·|S| + s'.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostMetric {
    n_actions: usize,
    n_states: usize,
    /// Row-major |Z|×|Z| table.
    table: Vec<f64>,
    diam: f64,
    kind: CostKind,
}

impl CostMetric {
    /// The scaled taxicab metric on action–state pairs.
    pub fn paper_default(n_states: usize, n_actions: usize) -> Self {
        let z = n_states * n_actions;
        let denom = (n_states + n_actions) as f64;
        let mut table = vec![0.0; z * z];
        for i in 0..z {
            let (ai, si) = (i / n_states, i % n_states);
            for j in 0..z {
                let (aj, sj) = (j / n_states, j % n_states);
                table[i * z + j] =
                    ((si as isize - sj as isize).abs() + (ai as isize - aj as isize).abs()) as f64
                        / denom;
            }
        }
        let diam = table.iter().cloned().fold(0.0, f64::max);
        Self {
            n_actions,
            n_states,
            table,
            diam,
            kind: CostKind::Default,
        }
    }

    /// Builds a custom metric from a dense table, validating symmetry, zero
    /// diagonal, nonnegativity, and the triangle inequality (exhaustively up
    /// to 64 points, on 200 000 seeded triples beyond that).
    pub fn from_table(n_states: usize, n_actions: usize, table: Vec<f64>) -> Result<Self> {
        let z = n_states * n_actions;
        if table.len() != z * z {
            return Err(OpeError::DimensionMismatch(format!(
                "cost table has {} entries, expected {}",
                table.len(),
                z * z
            )));
        }
        for i in 0..z {
            if table[i * z + i] != 0.0 {
                return Err(OpeError::InvalidInput(format!(
                    "cost({i},{i}) must be 0"
                )));
            }
            for j in 0..z {
                let c = table[i * z + j];
                if !c.is_finite() || c < 0.0 {
                    return Err(OpeError::InvalidInput(format!("cost({i},{j}) = {c}")));
                }
                if (c - table[j * z + i]).abs() > COST_TIE_TOL {
                    return Err(OpeError::InvalidInput(format!(
                        "cost table is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let check = |i: usize, j: usize, k: usize| -> Result<()> {
            if table[i * z + j] > table[i * z + k] + table[k * z + j] + COST_TIE_TOL {
                return Err(OpeError::InvalidInput(format!(
                    "triangle inequality fails for ({i},{j}) via {k}"
                )));
            }
            Ok(())
        };
        if z <= 64 {
            for i in 0..z {
                for j in 0..z {
                    for k in 0..z {
                        check(i, j, k)?;
                    }
                }
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0xC057);
            for _ in 0..200_000 {
                let i = (rng.next_u64() % z as u64) as usize;
                let j = (rng.next_u64() % z as u64) as usize;
                let k = (rng.next_u64() % z as u64) as usize;
                check(i, j, k)?;
            }
        }
        let diam = table.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            n_actions,
            n_states,
            table,
            diam,
            kind: CostKind::Custom,
        })
    }

    pub fn n_points(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn point(&self, action: usize, next_state: usize) -> usize {
        action * self.n_states + next_state
    }

    pub fn cost(&self, i: usize, j: usize) -> f64 {
        self.table[i * self.n_points() + j]
    }

    /// Column of costs into anchor point `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_points()).map(|i| self.cost(i, j)).collect()
    }

    pub fn diam(&self) -> f64 {
        self.diam
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    /// Writes the strict upper triangle as line records (`i j c`), preceded
    /// by a header; the diagonal is implicitly zero.
    pub fn save_table(&self, path: &Path) -> Result<()> {
        let z = self.n_points();
        let mut out = String::new();
        writeln!(out, "cost states={} actions={}", self.n_states, self.n_actions)
            .expect("write to string");
        for i in 0..z {
            for j in (i + 1)..z {
                writeln!(out, "{} {} {}", i, j, self.cost(i, j)).expect("write to string");
            }
        }
        std::fs::write(path, out).map_err(|source| OpeError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Loads and validates a table written by [`CostMetric::save_table`].
    pub fn load_table(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| OpeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |line: usize, message: String| OpeError::MalformedRecord {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut lines = BufReader::new(file).lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let header = header.map_err(|source| OpeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("cost") {
            return Err(bad(1, "expected `cost` header record".into()));
        }
        let mut n_states = None;
        let mut n_actions = None;
        for p in parts {
            match p.split_once('=') {
                Some(("states", v)) => n_states = v.parse().ok(),
                Some(("actions", v)) => n_actions = v.parse().ok(),
                _ => return Err(bad(1, format!("bad header field `{p}`"))),
            }
        }
        let (n_states, n_actions) = match (n_states, n_actions) {
            (Some(s), Some(a)) => (s, a),
            _ => return Err(bad(1, "header must carry states= and actions=".into())),
        };
        let z: usize = n_states * n_actions;
        let mut table = vec![0.0; z * z];
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|source| OpeError::Io {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != 3 {
                return Err(bad(line_no, format!("expected 3 fields, got {}", toks.len())));
            }
            let i: usize = toks[0]
                .parse()
                .map_err(|_| bad(line_no, "i is not an integer".into()))?;
            let j: usize = toks[1]
                .parse()
                .map_err(|_| bad(line_no, "j is not an integer".into()))?;
            let c: f64 = toks[2]
                .parse()
                .map_err(|_| bad(line_no, "c is not a float".into()))?;
            if i >= z || j >= z {
                return Err(bad(line_no, "point index out of range".into()));
            }
            table[i * z + j] = c;
            table[j * z + i] = c;
        }
        Self::from_table(n_states, n_actions, table)
    }
}

/// A dense real-valued function on the point space, same indexing as the
/// metric.
pub type AtomFunction = [f64];

/// A weighted atom list over the point space summing to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalDistribution {
    pub atoms: Vec<(usize, f64)>,
}

impl ConditionalDistribution {
    pub fn expectation(&self, f: &AtomFunction) -> f64 {
        self.atoms.iter().map(|&(z, w)| w * f[z]).sum()
    }
}

/// The steepest increase of f away from z, normalized by transport cost:
/// max over z̃ ≠ z of (f(z̃) − f(z)) / c(z̃, z). May be negative; infinite
/// when a zero-cost distinct point has a strictly larger value.
pub fn global_slope(f: &AtomFunction, z: usize, cost: &CostMetric) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for zt in 0..cost.n_points() {
        if zt == z {
            continue;
        }
        let c = cost.cost(zt, z);
        let num = f[zt] - f[z];
        let slope = if c > 0.0 {
            num / c
        } else if num > 0.0 {
            f64::INFINITY
        } else {
            continue;
        };
        if slope > best {
            best = slope;
        }
    }
    best
}

/// The Lipschitz norm of f restricted to a support set: the maximum global
/// slope over the support.
pub fn lipschitz_norm(f: &AtomFunction, support: &[usize], cost: &CostMetric) -> Result<f64> {
    if support.is_empty() {
        return Err(OpeError::InvalidInput(
            "lipschitz norm needs a nonempty support".into(),
        ));
    }
    Ok(support
        .iter()
        .map(|&z| global_slope(f, z, cost))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Walks the lower envelope of the lines {f(z) + λ·c(z, anchor)} over λ ≥ 0,
/// pushing (kink λ, slope change · weight) events, and returns the initial
/// envelope slope.
fn envelope_events(
    f: &AtomFunction,
    costs: &[f64],
    weight: f64,
    events: &mut Vec<(f64, f64)>,
) -> f64 {
    let n = f.len();
    let mut cur = 0usize;
    for z in 1..n {
        if (f[z], costs[z]) < (f[cur], costs[cur]) {
            cur = z;
        }
    }
    let first_slope = costs[cur];
    let mut lam = 0.0;
    while costs[cur] > 0.0 {
        let mut next: Option<(f64, usize)> = None;
        for z in 0..n {
            if costs[z] >= costs[cur] {
                continue;
            }
            let crossing = ((f[z] - f[cur]) / (costs[cur] - costs[z])).max(lam);
            match next {
                Some((best, zb))
                    if crossing > best || (crossing == best && costs[z] >= costs[zb]) => {}
                _ => next = Some((crossing, z)),
            }
        }
        let Some((crossing, z)) = next else { break };
        events.push((crossing, weight * (costs[z] - costs[cur])));
        lam = crossing;
        cur = z;
    }
    first_slope
}

/// Evaluates the dual objective −λρ + Σ_i w_i min_z {f(z) + λ c(z, z_i)}.
fn dual_objective(f: &AtomFunction, atoms: &[(usize, f64)], rho: f64, lam: f64, cost: &CostMetric) -> f64 {
    let mut total = -lam * rho;
    for &(zi, w) in atoms {
        let mut m = f64::INFINITY;
        for z in 0..f.len() {
            let v = f[z] + lam * cost.cost(z, zi);
            if v < m {
                m = v;
            }
        }
        total += w * m;
    }
    total
}

fn validate_inner_inputs(f: &AtomFunction, atoms: &[(usize, f64)], rho: f64, cost: &CostMetric) -> Result<()> {
    if rho < 0.0 {
        return Err(OpeError::InvalidInput(format!("radius must be >= 0, got {rho}")));
    }
    if atoms.is_empty() {
        return Err(OpeError::InvalidInput("atom set must be nonempty".into()));
    }
    if f.len() != cost.n_points() {
        return Err(OpeError::DimensionMismatch(format!(
            "function has {} points, metric has {}",
            f.len(),
            cost.n_points()
        )));
    }
    if atoms.iter().any(|&(z, _)| z >= cost.n_points()) {
        return Err(OpeError::InvalidInput("atom point out of range".into()));
    }
    Ok(())
}

/// Exact worst-case expectation of f over the Wasserstein ball of radius
/// `rho` around the weighted atoms. Returns the value and an attaining λ*
/// ([`LAMBDA_UNCONSTRAINED`] when ρ = 0).
pub fn robust_inner(
    f: &AtomFunction,
    atoms: &[(usize, f64)],
    rho: f64,
    cost: &CostMetric,
) -> Result<(f64, f64)> {
    validate_inner_inputs(f, atoms, rho, cost)?;
    if rho == 0.0 {
        let mean = atoms.iter().map(|&(z, w)| w * f[z]).sum();
        return Ok((mean, LAMBDA_UNCONSTRAINED));
    }
    let mut events: Vec<(f64, f64)> = Vec::new();
    let mut slope = -rho;
    for &(zi, w) in atoms {
        slope += w * envelope_events(f, &cost.column(zi), w, &mut events);
    }
    let lambda_star = if slope <= 0.0 {
        0.0
    } else {
        events.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite kinks"));
        let mut found = None;
        for &(lam, ds) in &events {
            slope += ds;
            if slope <= 0.0 {
                found = Some(lam);
                break;
            }
        }
        found.ok_or_else(|| {
            OpeError::Internal("dual slope never crossed zero; metric lacks zero self-cost".into())
        })?
    };
    Ok((dual_objective(f, atoms, rho, lambda_star, cost), lambda_star))
}

/// Exact best-case expectation over the same ball, the mirror problem
/// min_{λ≥0} { λρ + Σ_i w_i max_z {f(z) − λ c(z, z_i)} }, solved as
/// −robust(−f). λ* coincides.
pub fn optimistic_inner(
    f: &AtomFunction,
    atoms: &[(usize, f64)],
    rho: f64,
    cost: &CostMetric,
) -> Result<(f64, f64)> {
    let neg: Vec<f64> = f.iter().map(|x| -x).collect();
    let (value, lambda) = robust_inner(&neg, atoms, rho, cost)?;
    Ok((-value, lambda))
}

/// The worst-case gain over the ball: optimistic value minus empirical mean.
pub fn regularizer_value(
    f: &AtomFunction,
    atoms: &[(usize, f64)],
    rho: f64,
    cost: &CostMetric,
) -> Result<f64> {
    let (value, _) = optimistic_inner(f, atoms, rho, cost)?;
    let mean: f64 = atoms.iter().map(|&(z, w)| w * f[z]).sum();
    Ok(value - mean)
}

/// Recovers a minimizing distribution from λ*: each atom's mass goes to a
/// minimizer of f(z) + λ* c(z, z_i); tied atoms are split, in ascending atom
/// order, between their cheapest and most expensive tied destinations until
/// the total transport cost reaches ρ (λ* > 0) or stays at the cheapest
/// assignment (λ* = 0). Returns the distribution and the plan's cost, a
/// feasibility certificate for W(μ*, μ̂) ≤ ρ.
///
/// A greedy assignment ranked by drop-per-cost alone is not primal-optimal:
/// the budget constraint couples atoms, and the marginal exchange rate at
/// the optimum is exactly λ*, so recovery has to route through the dual.
/// The one-sided slopes of the dual at λ* bracket zero, which is what makes
/// a tie split hitting the cost target exist.
pub fn worst_case_distribution(
    f: &AtomFunction,
    atoms: &[(usize, f64)],
    rho: f64,
    cost: &CostMetric,
) -> Result<(ConditionalDistribution, f64)> {
    let (dual_value, lambda) = robust_inner(f, atoms, rho, cost)?;
    if lambda == LAMBDA_UNCONSTRAINED {
        return Ok((
            ConditionalDistribution {
                atoms: atoms.to_vec(),
            },
            0.0,
        ));
    }
    // tie sets per atom at λ*
    struct TiedAtom {
        weight: f64,
        cheap: usize,
        cheap_cost: f64,
        far: usize,
        far_cost: f64,
    }
    let mut plan: Vec<TiedAtom> = Vec::with_capacity(atoms.len());
    for &(zi, w) in atoms {
        let col = cost.column(zi);
        let mut min_obj = f64::INFINITY;
        for z in 0..f.len() {
            let v = f[z] + lambda * col[z];
            if v < min_obj {
                min_obj = v;
            }
        }
        let tie_tol = 1e-9 * (1.0 + min_obj.abs());
        let mut cheap = None::<usize>;
        let mut far = None::<usize>;
        for z in 0..f.len() {
            if f[z] + lambda * col[z] <= min_obj + tie_tol {
                if cheap.map_or(true, |c| col[z] < col[c] - COST_TIE_TOL) {
                    cheap = Some(z);
                }
                if far.map_or(true, |c| col[z] > col[c] + COST_TIE_TOL) {
                    far = Some(z);
                }
            }
        }
        let cheap = cheap.expect("tie set contains the minimizer");
        let far = far.expect("tie set contains the minimizer");
        plan.push(TiedAtom {
            weight: w,
            cheap,
            cheap_cost: col[cheap],
            far,
            far_cost: col[far],
        });
    }
    let mut total_cost: f64 = plan.iter().map(|p| p.weight * p.cheap_cost).sum();
    // fraction of each atom's mass diverted to the far destination
    let mut divert = vec![0.0; plan.len()];
    if lambda > 0.0 {
        let mut deficit = rho - total_cost;
        for (i, p) in plan.iter().enumerate() {
            if deficit <= 0.0 {
                break;
            }
            let capacity = p.weight * (p.far_cost - p.cheap_cost);
            if capacity <= 0.0 {
                continue;
            }
            let take = deficit.min(capacity);
            divert[i] = take / capacity;
            total_cost += take;
            deficit -= take;
        }
    }
    let mut mass = std::collections::BTreeMap::<usize, f64>::new();
    for (i, p) in plan.iter().enumerate() {
        let to_far = p.weight * divert[i];
        if to_far > 0.0 {
            *mass.entry(p.far).or_insert(0.0) += to_far;
        }
        let stay = p.weight - to_far;
        if stay > 0.0 {
            *mass.entry(p.cheap).or_insert(0.0) += stay;
        }
    }
    let dist = ConditionalDistribution {
        atoms: mass.into_iter().collect(),
    };
    let achieved = dist.expectation(f);
    if (achieved - dual_value).abs() > 1e-8 * (1.0 + dual_value.abs())
        || total_cost > rho + 1e-10
    {
        return Err(OpeError::Internal(format!(
            "primal recovery gap: E[f]={achieved}, dual={dual_value}, cost={total_cost}, rho={rho}"
        )));
    }
    Ok((dist, total_cost))
}
