//! Exact memory/time trade-off frontiers for operator-level parallelization
//! of computation graphs.
//!
//! Given a computation graph, a device topology with profiled communication
//! costs, and per-configuration cost tables, the solver computes the full
//! Pareto frontier between per-iteration execution time and peak memory over
//! all operator-level parallelization strategies, and reconstructs the
//! complete strategy behind any frontier point. The search first reduces the
//! graph to a linear backbone with frontier-preserving eliminations, then
//! runs a linear dynamic program over cumulative frontiers.

pub mod cli;
pub mod config;
pub mod costmodel;
pub mod eliminate;
pub mod error;
pub mod fixture;
pub mod frontier;
pub mod graph;
pub mod solver;

pub use error::{Error, Result};
