//! Synthetic benchmark scenarios, the benchmark runner and self-checks.

pub mod benchmark;
pub mod cli;
pub mod scenario;
pub mod selfcheck;
