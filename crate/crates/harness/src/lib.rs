//! Experiment harness: MNIST loading, orchestration of attack and
//! certification runs, and CSV reports.

pub mod data;
pub mod error;
pub mod experiment;
pub mod report;
pub mod spec;

pub use error::{ExitKind, HarnessError, Result};
pub use experiment::{evaluate, evaluation_set, obtain_model, run_experiment, ExperimentOutput};
pub use report::{emit_plot_data, plot_tables, read_report, ReportRow};
pub use spec::{DefenseName, ExperimentSpec};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/experiments.md")]
mod book {}
