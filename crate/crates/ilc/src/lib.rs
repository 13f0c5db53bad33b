//! File formats, configuration, the staged experiment pipeline and the
//! `ilc` command line, on top of `ilc-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod runner;
pub mod store;
pub mod tables;

pub use error::{Error, Result};
