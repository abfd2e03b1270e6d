//! Exact primal cross-check for the inner dual solver.
//!
//! The inner problem is a transport LP with one row per atom plus a single
//! budget row, so a basic optimal solution moves every atom to one
//! destination except at most one atom that splits between two. For tiny
//! instances that structure can be enumerated exhaustively, giving an exact
//! primal optimum that is independent of the dual/breakpoint code path.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_ope::wdro::{optimistic_inner, robust_inner, CostMetric};

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Exact primal minimum by enumerating basic solutions: one destination per
/// atom, plus every way to let a single atom split between its chosen
/// destination and one alternative so the budget binds.
fn primal_enumeration(f: &[f64], atoms: &[(usize, f64)], rho: f64, cost: &CostMetric) -> f64 {
    let z = f.len();
    let n = atoms.len();
    let mut best = f64::INFINITY;
    let mut dests = vec![0usize; n];
    loop {
        let plan_cost: f64 = atoms
            .iter()
            .zip(&dests)
            .map(|(&(zi, w), &d)| w * cost.cost(d, zi))
            .sum();
        let plan_value: f64 = atoms
            .iter()
            .zip(&dests)
            .map(|(&(_, w), &d)| w * f[d])
            .sum();
        if plan_cost <= rho + 1e-12 {
            best = best.min(plan_value);
        }
        // split one atom toward an alternative destination until the budget
        // binds (a fraction x of its mass moves to the alternative)
        for (i, &(zi, w)) in atoms.iter().enumerate() {
            let (d, c_d) = (dests[i], cost.cost(dests[i], zi));
            for alt in 0..z {
                let c_alt = cost.cost(alt, zi);
                let delta_cost = w * (c_alt - c_d);
                if delta_cost.abs() < 1e-15 {
                    continue;
                }
                let x = (rho - plan_cost) / delta_cost;
                if (0.0..=1.0).contains(&x) {
                    let value = plan_value + x * w * (f[alt] - f[d]);
                    best = best.min(value);
                }
            }
        }
        // advance the destination assignment odometer
        let mut k = 0;
        while k < n {
            dests[k] += 1;
            if dests[k] < z {
                break;
            }
            dests[k] = 0;
            k += 1;
        }
        if k == n {
            break;
        }
    }
    best
}

#[test]
fn dual_matches_exact_primal_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x11AD);
    for trial in 0..400 {
        let n_actions = 1 + (rng.next_u64() % 2) as usize;
        let n_states = 2 + (rng.next_u64() % 2) as usize;
        let cost = CostMetric::paper_default(n_states, n_actions);
        let z = cost.n_points();
        let f: Vec<f64> = (0..z).map(|_| 2.0 * unit(&mut rng) - 1.0).collect();
        let n_atoms = 1 + (rng.next_u64() % 3) as usize;
        let mut atoms: Vec<(usize, f64)> = (0..n_atoms)
            .map(|_| ((rng.next_u64() % z as u64) as usize, unit(&mut rng) + 1e-2))
            .collect();
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        for a in &mut atoms {
            a.1 /= total;
        }
        let rho = 1.5 * cost.diam() * unit(&mut rng);
        let (dual, _) = robust_inner(&f, &atoms, rho, &cost).unwrap();
        let primal = primal_enumeration(&f, &atoms, rho, &cost);
        assert!(
            (dual - primal).abs() <= 1e-9 * (1.0 + dual.abs()),
            "trial {trial}: dual {dual} vs primal {primal}"
        );
        // the optimistic side through the same oracle on −f
        let neg: Vec<f64> = f.iter().map(|x| -x).collect();
        let (hi, _) = optimistic_inner(&f, &atoms, rho, &cost).unwrap();
        let primal_hi = -primal_enumeration(&neg, &atoms, rho, &cost);
        assert!(
            (hi - primal_hi).abs() <= 1e-9 * (1.0 + hi.abs()),
            "trial {trial}: optimistic {hi} vs primal {primal_hi}"
        );
    }
}

#[test]
fn dual_matches_primal_on_custom_metrics() {
    // exercise non-grid geometry, including ties and zero-cost pairs kept
    // out by validation; the metric below has uneven legs
    let table = vec![
        0.0, 0.3, 0.5, 0.7, //
        0.3, 0.0, 0.4, 0.6, //
        0.5, 0.4, 0.0, 0.2, //
        0.7, 0.6, 0.2, 0.0,
    ];
    let cost = CostMetric::from_table(4, 1, table).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x11AE);
    for trial in 0..200 {
        let f: Vec<f64> = (0..4).map(|_| 3.0 * unit(&mut rng)).collect();
        let n_atoms = 1 + (rng.next_u64() % 3) as usize;
        let mut atoms: Vec<(usize, f64)> = (0..n_atoms)
            .map(|_| ((rng.next_u64() % 4) as usize, unit(&mut rng) + 1e-2))
            .collect();
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        for a in &mut atoms {
            a.1 /= total;
        }
        let rho = cost.diam() * unit(&mut rng);
        let (dual, _) = robust_inner(&f, &atoms, rho, &cost).unwrap();
        let primal = primal_enumeration(&f, &atoms, rho, &cost);
        assert!(
            (dual - primal).abs() <= 1e-9 * (1.0 + dual.abs()),
            "trial {trial}: dual {dual} vs primal {primal}"
        );
    }
}
