//! The runnable surface: configuration, orchestration and artifacts.

pub mod bench;
pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod metrics;
pub mod run;
