//! Command-line pipeline for panoramic-to-3D dental reconstruction: phantom
//! generation, paired synthesis, training, curved reconstruction and
//! evaluation, all driven by one JSON configuration.
//!
//! The binary is a thin layer over [`commands`] and [`pipeline::run_all`].

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod split;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use pipeline::{run_all, RunSummary};
