//! Experiment orchestration: configuration, sweeps, fits and reporting.

pub mod config;
pub mod emit;
pub mod fit;
pub mod sweeps;

pub use config::{Experiment, ExperimentConfig, StopRule};
pub use emit::{emit, Cell, Format, PlotSpec, Report, Table};
pub use sweeps::run;
