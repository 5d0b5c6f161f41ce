//! Command-line and HTTP front end for the epimem memory engine.

pub mod config;
pub mod eval;
pub mod metrics;
pub mod providers;
pub mod qa;
pub mod server;
pub mod transcript;
