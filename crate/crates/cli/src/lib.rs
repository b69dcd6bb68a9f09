//! The `fscil` command line: experiment runs, sweeps, ablations, checkpoint
//! evaluation and reports built from persisted run records.

pub mod args;
pub mod commands;
pub mod plot;
pub mod report;
