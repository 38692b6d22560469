//! Config-driven experiment pipelines behind the command-line tool.

mod commands;
mod config;

pub use commands::{
    cmd_imp_compare, cmd_surface, cmd_sweep_batchsize, cmd_sweep_evalcount, cmd_train, linear_baseline,
    random_counterparts, ticket_label, BatchSizeRow, Comparison, ComparisonReport, ComparisonRow, EvalCountReport,
    EvalCountRow, Progress, RunOptions, SurfaceFiles, SurfaceOutcome, TrainOutcome, TrainSummary,
};
pub use config::{
    ArchitectureConfig, DatasetConfig, DirectionConfig, EvalConfig, ExperimentConfig, ImpConfig, LoadedData,
    SweepConfig,
};
