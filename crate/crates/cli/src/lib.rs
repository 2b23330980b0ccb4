//! Experiment runner for the zigzag KV-cache simulator.

pub mod config;
pub mod run;

pub use config::{ExperimentConfig, MetricToggles, NeedleSpec, Source};
pub use run::{compare, needle, profile, CellOutcome, CompareResult, NeedleMatrix, Subject};
