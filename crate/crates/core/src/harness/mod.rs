//! Experiment harness: synthetic data, configuration, end-to-end runs, and reports.

pub mod config;
pub mod data;
pub mod experiment;
pub mod report;
