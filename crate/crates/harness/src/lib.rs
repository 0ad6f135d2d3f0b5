//! Experiment harness: configuration, output-directory management and the
//! context-screen and size-sweep pipelines behind the `opsd-lab` binary.

pub mod config;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use pipeline::Lab;
