//! Two-stage colorization pipeline for monochrome multi-view and dynamic
//! scenes: key-view selection, per-scene colorizer tuning, view colorization,
//! Lab Gaussian reconstruction and consistency evaluation.

pub mod config;
pub mod evaluate;
pub mod stages;
pub mod error;
pub mod io;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{Error, Result};
