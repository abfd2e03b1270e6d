//! Seeded trajectory simulation and bit-stable dataset persistence.
//!
//! Randomness comes from ChaCha8 seeded with a caller-supplied 64-bit seed;
//! trajectory j draws from stream j of the same seed, so datasets are
//! identical across platforms and independent of any parallel generation
//! order. Categorical draws use a single uniform sample mapped through the
//! inverse CDF over ascending indices, with the uniform built from the top
//! 53 bits of one ChaCha output word pair.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OpeError, Result};
use crate::mdp::{FiniteMdp, Policy};

/// One logged transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// Generation metadata carried by a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub seed: u64,
    pub episodes: usize,
    pub horizon: usize,
    pub n_states: usize,
    pub n_actions: usize,
}

/// Logged trajectories under a behavior policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Vec<Step>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    /// Total number of logged transitions Σ_j T_j.
    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        let meta = &self.meta;
        if self.trajectories.len() != meta.episodes {
            return Err(OpeError::InvalidInput(format!(
                "dataset holds {} trajectories, metadata says {}",
                self.trajectories.len(),
                meta.episodes
            )));
        }
        for (j, traj) in self.trajectories.iter().enumerate() {
            if traj.len() != meta.horizon {
                return Err(OpeError::InvalidInput(format!(
                    "trajectory {j} has {} steps, metadata says {}",
                    traj.len(),
                    meta.horizon
                )));
            }
            for (t, step) in traj.iter().enumerate() {
                if step.state >= meta.n_states
                    || step.next_state >= meta.n_states
                    || step.action >= meta.n_actions
                {
                    return Err(OpeError::InvalidInput(format!(
                        "trajectory {j} step {t} has out-of-range indices"
                    )));
                }
                if t + 1 < traj.len() && traj[t + 1].state != step.next_state {
                    return Err(OpeError::InvalidInput(format!(
                        "trajectory {j} is not chained at step {t}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Uniform in [0,1) from the top 53 bits of a 64-bit word.
fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Inverse-CDF categorical draw over ascending indices.
fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // guard against accumulated rounding at u ≈ 1
    probs.len() - 1
}

/// Simulates `episodes` independent trajectories of length `horizon` under
/// the behavior policy. Rewards are emitted as the deterministic table value
/// r(s,a). Deterministic byte-for-byte given the seed.
pub fn simulate(
    mdp: &FiniteMdp,
    behavior: &Policy,
    episodes: usize,
    horizon: usize,
    seed: u64,
    env: &str,
) -> Result<Dataset> {
    if episodes == 0 || horizon == 0 {
        return Err(OpeError::InvalidInput(
            "episodes and horizon must both be at least 1".into(),
        ));
    }
    if behavior.n_states() != mdp.n_states() || behavior.n_actions() != mdp.n_actions() {
        return Err(OpeError::DimensionMismatch(
            "behavior policy does not match the MDP".into(),
        ));
    }
    let mut trajectories = Vec::with_capacity(episodes);
    for j in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let mut traj = Vec::with_capacity(horizon);
        let mut s = sample_categorical(mdp.initial_dist(), unit_f64(rng.next_u64()));
        for _ in 0..horizon {
            let a = sample_categorical(
                &(0..mdp.n_actions())
                    .map(|a| behavior.prob(s, a))
                    .collect::<Vec<_>>(),
                unit_f64(rng.next_u64()),
            );
            let s_next = sample_categorical(mdp.row(s, a), unit_f64(rng.next_u64()));
            traj.push(Step {
                state: s,
                action: a,
                reward: mdp.r(s, a),
                next_state: s_next,
            });
            s = s_next;
        }
        trajectories.push(traj);
    }
    Ok(Dataset {
        trajectories,
        meta: DatasetMeta {
            env: env.to_string(),
            seed,
            episodes,
            horizon,
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
        },
    })
}

/// Serializes a dataset: one header record, then one line per transition
/// with fields `traj t s a r s_next`. Floats use the shortest decimal that
/// round-trips, so repeated saves are byte-identical.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let mut out = String::new();
    let meta = &ds.meta;
    writeln!(
        out,
        "dataset env={} seed={} episodes={} horizon={} states={} actions={}",
        meta.env, meta.seed, meta.episodes, meta.horizon, meta.n_states, meta.n_actions
    )
    .expect("write to string");
    for (j, traj) in ds.trajectories.iter().enumerate() {
        for (t, step) in traj.iter().enumerate() {
            writeln!(
                out,
                "{} {} {} {} {} {}",
                j, t, step.state, step.action, step.reward, step.next_state
            )
            .expect("write to string");
        }
    }
    let mut file = std::fs::File::create(path).map_err(|source| OpeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(out.as_bytes()).map_err(|source| OpeError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> OpeError {
    OpeError::MalformedRecord {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn header_field<'a>(
    fields: &'a [(&'a str, &'a str)],
    key: &str,
    path: &Path,
) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| malformed(path, 1, format!("header is missing `{key}`")))
}

/// Loads a dataset saved by [`save_dataset`], validating the header, index
/// ranges, and trajectory chaining. Round-trips field-for-field.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| OpeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| malformed(path, 1, "empty file"))?;
    let header = header.map_err(|source| OpeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("dataset") {
        return Err(malformed(path, 1, "expected `dataset` header record"));
    }
    let fields: Vec<(&str, &str)> = parts
        .map(|p| p.split_once('=').ok_or_else(|| malformed(path, 1, format!("bad header field `{p}`"))))
        .collect::<Result<_>>()?;
    let parse = |v: &str, what: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| malformed(path, 1, format!("{what} is not an integer: `{v}`")))
    };
    let meta = DatasetMeta {
        env: header_field(&fields, "env", path)?.to_string(),
        seed: header_field(&fields, "seed", path)?
            .parse()
            .map_err(|_| malformed(path, 1, "seed is not an integer"))?,
        episodes: parse(header_field(&fields, "episodes", path)?, "episodes")?,
        horizon: parse(header_field(&fields, "horizon", path)?, "horizon")?,
        n_states: parse(header_field(&fields, "states", path)?, "states")?,
        n_actions: parse(header_field(&fields, "actions", path)?, "actions")?,
    };
    let mut trajectories: Vec<Vec<Step>> = vec![Vec::new(); meta.episodes];
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
        if toks.len() != 6 {
            return Err(malformed(path, line_no, format!("expected 6 fields, got {}", toks.len())));
        }
        let int = |i: usize, what: &str| -> Result<usize> {
            toks[i]
                .parse()
                .map_err(|_| malformed(path, line_no, format!("{what} is not an integer: `{}`", toks[i])))
        };
        let (j, t) = (int(0, "traj")?, int(1, "t")?);
        let step = Step {
            state: int(2, "s")?,
            action: int(3, "a")?,
            reward: toks[4]
                .parse()
                .map_err(|_| malformed(path, line_no, format!("r is not a float: `{}`", toks[4])))?,
            next_state: int(5, "s_next")?,
        };
        if j >= meta.episodes {
            return Err(malformed(path, line_no, format!("traj {j} out of declared range")));
        }
        if step.state >= meta.n_states || step.next_state >= meta.n_states {
            return Err(malformed(path, line_no, "state index out of declared range"));
        }
        if step.action >= meta.n_actions {
            return Err(malformed(path, line_no, "action index out of declared range"));
        }
        if t != trajectories[j].len() {
            return Err(malformed(
                path,
                line_no,
                format!("step {t} of traj {j} out of order (expected {})", trajectories[j].len()),
            ));
        }
        trajectories[j].push(step);
    }
    let ds = Dataset { trajectories, meta };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deterministic_mdp() -> FiniteMdp {
        // forced cycle 0 -> 1 -> 2 -> 0 under the single action
        let n = 3;
        let mut p = vec![0.0; n * n];
        p[0 * n + 1] = 1.0;
        p[1 * n + 2] = 1.0;
        p[2 * n + 0] = 1.0;
        FiniteMdp::new(n, 1, p, vec![1.0, 2.0, 3.0], 0.9, vec![1.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn forced_path_is_seed_independent() {
        let mdp = deterministic_mdp();
        let pi = Policy::uniform(3, 1);
        let a = simulate(&mdp, &pi, 1, 5, 1, "cycle").unwrap();
        let b = simulate(&mdp, &pi, 1, 5, 999, "cycle").unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        let states: Vec<usize> = a.trajectories[0].iter().map(|s| s.state).collect();
        assert_eq!(states, vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn counts_match_requested_shape() {
        let mdp = deterministic_mdp();
        let ds = simulate(&mdp, &Policy::uniform(3, 1), 2, 3, 7, "cycle").unwrap();
        assert_eq!(ds.trajectories.len(), 2);
        assert_eq!(ds.n_transitions(), 6);
    }

    #[test]
    fn long_run_frequencies_match_stationary_distribution() {
        // Two-state chain with known stationary distribution; oracle solves
        // the stationarity system directly.
        let p01 = 0.3;
        let p10 = 0.7;
        let mdp = FiniteMdp::new(
            2,
            1,
            vec![1.0 - p01, p01, p10, 1.0 - p10],
            vec![0.0, 0.0],
            0.95,
            vec![0.5, 0.5],
        )
        .unwrap();
        let stationary = [p10 / (p01 + p10), p01 / (p01 + p10)];
        let ds = simulate(&mdp, &Policy::uniform(2, 1), 1, 100_000, 7, "chain").unwrap();
        let mut freq = [0.0; 2];
        for step in &ds.trajectories[0] {
            freq[step.state] += 1.0;
        }
        let total: f64 = freq.iter().sum();
        let tv = 0.5
            * ((freq[0] / total - stationary[0]).abs() + (freq[1] / total - stationary[1]).abs());
        assert!(tv < 0.01, "total variation {tv}");
    }

    #[test]
    fn simulate_is_a_pure_function_of_its_inputs() {
        let mdp = deterministic_mdp();
        let pi = Policy::uniform(3, 1);
        let a = simulate(&mdp, &pi, 4, 6, 42, "cycle").unwrap();
        let b = simulate(&mdp, &pi, 4, 6, 42, "cycle").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn replay_assigns_positive_probability() {
        let mdp = deterministic_mdp();
        let ds = simulate(&mdp, &Policy::uniform(3, 1), 3, 8, 11, "cycle").unwrap();
        for traj in &ds.trajectories {
            for step in traj {
                assert!(mdp.p(step.state, step.action, step.next_state) > 0.0);
                assert_eq!(step.reward, mdp.r(step.state, step.action));
            }
        }
    }

    #[test]
    fn roundtrip_identity_and_byte_stability() {
        let dir = std::env::temp_dir().join("robust_ope_traj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mdp = deterministic_mdp();
        let ds = simulate(&mdp, &Policy::uniform(3, 1), 2, 4, 7, "cycle").unwrap();
        let p1 = dir.join("a.log");
        let p2 = dir.join("b.log");
        save_dataset(&ds, &p1).unwrap();
        save_dataset(&ds, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let back = load_dataset(&p1).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_dataset_roundtrips_header_only() {
        let dir = std::env::temp_dir().join("robust_ope_traj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let ds = Dataset {
            trajectories: vec![],
            meta: DatasetMeta {
                env: "none".into(),
                seed: 0,
                episodes: 0,
                horizon: 5,
                n_states: 2,
                n_actions: 2,
            },
        };
        let p = dir.join("empty.log");
        save_dataset(&ds, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(load_dataset(&p).unwrap(), ds);
    }

    #[test]
    fn single_step_dataset_has_one_record() {
        let dir = std::env::temp_dir().join("robust_ope_traj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mdp = deterministic_mdp();
        let ds = simulate(&mdp, &Policy::uniform(3, 1), 1, 1, 7, "cycle").unwrap();
        let p = dir.join("one.log");
        save_dataset(&ds, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
    }

    #[test]
    fn malformed_records_carry_line_numbers() {
        let dir = std::env::temp_dir().join("robust_ope_traj_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.log");
        std::fs::write(
            &p,
            "dataset env=x seed=1 episodes=1 horizon=1 states=2 actions=1\n0 0 9 0 1.5 0\n",
        )
        .unwrap();
        match load_dataset(&p) {
            Err(OpeError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed record, got {other:?}"),
        }
    }
}
