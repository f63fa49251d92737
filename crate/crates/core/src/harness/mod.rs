//! Experiment configuration, seeded Monte Carlo runs, RMSE metrics and CSV output.

pub mod config;
pub mod metrics;
pub mod output;
pub mod runner;
pub mod seeds;
pub mod validate;

pub use config::{
    AreaSweep, ExperimentConfig, ExperimentSettings, PipelineOptions, ProbingKind, ResolvedVariant, ScanOrder,
    ScenePreset, Variant,
};
pub use metrics::{best_assignment, rmse_angle, rmse_location};
pub use output::{
    emit_crb_csv, emit_csv, emit_figure_data, figure_table, table_csv, write_csv, FIGURE_IDS, TABLE_HEADER,
};
pub use runner::{
    crb_sweep, run_experiment, scan_quantization_floor, CrbRow, PreparedScene, ResultRow, ResultTable, TargetOutcome,
    TrialRecord,
};
pub use seeds::{splitmix64, stream_seed, trial_seed};
pub use validate::{validate_suite, ValidationCheck};
