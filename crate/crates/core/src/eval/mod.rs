//! LOSO evaluation, repeated-trial statistics and reports.

mod config;
mod loso;
mod report;
mod stats;

pub use config::{EvalConfig, QueryStats, RunConfig, FULL_REPEATS, QUICK_REPEATS};
pub use loso::{
    ablation_run, evaluate_split, run_loso, run_loso_partial, sweep_heads, train_split, trial_seed,
    Switches, TrainedSplit,
};
pub use report::{
    emit_report, load_report, Audit, ReportFormat, RunReport, ShotSummary, SplitLog, SubjectSummary,
    TrialResult,
};
pub use stats::{mean, paired_ttest, std_dev, TTest};
