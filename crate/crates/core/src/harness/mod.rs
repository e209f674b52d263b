//! Experiment plumbing: configuration, file formats, checkpoints, the
//! two-phase training driver and reports.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod train;
pub mod report;
