//! Experiment configuration, execution, result persistence and charts for the
//! `bdtd` command-line tool.

pub mod config;
pub mod error;
pub mod matrix;
pub mod output;
pub mod plot;
pub mod run;

pub use config::{ExperimentConfig, MatrixConfig};
pub use error::{ExpError, Result};
pub use matrix::{run_matrix, MatrixPlan};
pub use run::run_experiment;
