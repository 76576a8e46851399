//! Config-driven experiments: data construction per seed, method runs,
//! multi-seed summaries and their on-disk artifacts.

mod config;
mod output;
mod runs;

pub use config::{ExperimentConfig, HeteroSettings, ModelConfig, SCHEMA_VERSION};
pub use output::{
    compare_table, fmt_num, write_compare, write_curve, write_hetero, write_method_outputs,
    write_partition,
};
pub use runs::{
    adapt_curve, build_data, evaluate_tests, init_model, run_compare, run_hetero_experiment,
    run_hetero_sweep, run_method, run_methods, summarize, CurveOutput, HeteroOutcome,
    HeteroSummary, MethodReport, MethodSummary, SeedData, SeedOutcome, SeedSummary, Stat,
};
