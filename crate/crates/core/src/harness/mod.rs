//! Experiment configuration, replica execution, reports and the CLI.

pub mod cli;
pub mod config;
pub mod runner;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig, TopologySpec};
pub use runner::{
    analyze, prepare, run_bound_comparison, run_experiment, simulate, write_outputs, AnalysisSummary,
    ComparisonReport, ComparisonRow, ExperimentOutcome, HarnessError, RunManifest, RunOptions, SeedPlan, Setup,
    Variant, VariantResult,
};
