pub mod analysis;
pub mod body;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
mod format;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod seeding;
pub mod synth;
pub mod vae;

pub use error::{Error, Result};

/// Version string embedded in every artifact.
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
