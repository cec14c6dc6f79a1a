//! Command implementations behind the `toot` binary.

pub mod commands;
pub mod experiment;

pub use experiment::{
    comparison_csv, comparison_table, default_grid, run_experiment, trace_path, ExperimentReport,
    ExperimentSpec, StrategySpec,
};
