//! Project orchestration: configuration, persistence, and the CLI commands.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod model_io;

pub use config::PipelineConfig;
pub use manifest::{Project, Stage};
pub use model_io::{load_basis, load_model, save_basis, save_model};
