//! Tracking metrics, the evaluation experiments and report output.

pub mod experiments;
pub mod metrics;
mod plot;
pub mod report;

pub use experiments::{
    run_attempts_experiment, run_click_robustness, run_deviation_experiment, run_heldout_evaluation,
    run_refiner_comparison, EvalConfig, InitMethod, ModelSet, SequenceSet,
};
pub use metrics::{aggregate, sequence_metrics, sot_metrics, MetricReport, SequenceMetrics};
pub use report::{emit_report, read_report, Experiment, Report};
