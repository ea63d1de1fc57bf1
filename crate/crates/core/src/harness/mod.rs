//! Synthetic data, evaluation and experiment sweeps.

pub mod data;
pub mod eval;
pub mod export;
pub mod sweep;

pub use data::{generate, Dataset, SyntheticSpec};
pub use eval::{accuracy_with_mask, evaluate, EvalResult};
pub use export::{export_attention, AttentionHeader};
pub use sweep::{
    platform_mask, rows_from_csv, rows_to_csv, run_sweep, score_units, summarize, sweep_run, train_run,
    ExperimentConfig, SweepGrid, SweepReport, SweepRow, SweepSummary, TrainedRun,
};
