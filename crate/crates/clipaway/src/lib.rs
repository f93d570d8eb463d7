//! Command-line tools and HTTP service for object removal.
//!
//! * [`config`]: the TOML configuration and weight verification.
//! * [`models`]: building encoders, the adapter and diffusion backends from
//!   a configuration, or deterministic mocks.
//! * [`jobs`]: the persistent job store behind the service.
//! * [`service`]: the REST API.
//! * [`cli`]: the `clipaway` command.

pub mod cli;
pub mod config;
pub mod jobs;
pub mod models;
pub mod service;

pub use config::ToolkitConfig;
pub use models::Models;
