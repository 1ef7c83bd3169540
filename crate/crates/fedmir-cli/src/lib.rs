//! Experiment orchestration on top of the `fedmir` library: JSON configs,
//! deterministic run/sweep execution, CSV/JSON persistence, and aggregation.

pub mod config;
pub mod csvout;
pub mod report;
pub mod runner;
