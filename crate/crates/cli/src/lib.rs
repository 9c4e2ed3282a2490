//! Orchestration of the longitudinal CT pipeline: configuration presets,
//! per-stage commands and the cached end-to-end run.

pub mod config;
pub mod error;
pub mod layout;
pub mod pipeline;
pub mod stages;
pub mod store;
pub mod version;

pub use config::{PipelineConfig, Preset};
pub use error::{CliError, CliResult};
pub use pipeline::run_pipeline;
