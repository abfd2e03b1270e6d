//! Distributionally robust and optimistic off-policy evaluation for finite
//! discounted MDPs.
//!
//! The crate estimates the value of a target policy from trajectories logged
//! under a behavior policy, hedging against sampling error and environment
//! shift with per-state Wasserstein balls around the empirical conditional
//! action–next-state distributions. It provides:
//!
//! - exact model-known solvers (values, visitation distributions, reference
//!   policies) in [`mdp`];
//! - seeded trajectory simulation and bit-stable dataset files in
//!   [`trajectory`];
//! - empirical conditionals and plug-in estimates in [`empirical`];
//! - the exact one-dimensional Wasserstein duals, worst-case distribution
//!   recovery, and slope/Lipschitz machinery in [`wdro`];
//! - robust/optimistic value iteration, radius schedules, and confidence
//!   intervals in [`robust_eval`];
//! - fixed-radius adversarial estimation with an asymptotic interval in
//!   [`adversarial`];
//! - robust batch policy optimization and the sample-average baseline in
//!   [`batch_rl`].
//!
//! All types are immutable after construction and every operation is a pure
//! function of its inputs, so shared read-only data can be used from multiple
//! threads freely.

pub mod adversarial;
pub mod batch_rl;
pub mod empirical;
pub mod error;
pub mod mdp;
pub mod robust_eval;
pub mod stats;
pub mod trajectory;
pub mod wdro;

pub use error::{OpeError, Result};
