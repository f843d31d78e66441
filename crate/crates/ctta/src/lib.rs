//! File formats, configuration and experiment drivers around `ctta-core`.
//!
//! The `ctta` binary wraps [`runner`]; everything here is usable as a
//! library as well.

pub mod archive;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod runner;

pub use config::RunConfig;
