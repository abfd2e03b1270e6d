//! Benchmark environments, experiment harnesses, and table output for the
//! robust off-policy evaluation estimators. The `ope-bench` binary wraps
//! these; the acceptance suite drives them directly.

pub mod config;
pub mod envs;
pub mod experiments;
pub mod table;
