//! Training, evaluation and verification harness for h-detach LSTMs.

pub mod config;
pub mod data;
pub mod engine;
pub mod grid;
pub mod model;
pub mod path_report;
pub mod runlog;
pub mod train;
pub mod transfer;
pub mod verify;
