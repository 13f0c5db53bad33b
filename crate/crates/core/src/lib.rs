//! Core algorithms for intermediate-layer classifiers (ILCs): linear probes
//! trained on frozen per-layer representations of a deep network, used to
//! find layers whose features generalize better under distribution shift
//! than the penultimate layer.
//!
//! The crate is `no_std` (with `alloc`); file formats, configuration and the
//! command line live in the companion `ilc` crate.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod linalg;
pub mod matrix;
pub mod optim;
pub mod probe;
pub mod protocol;
pub mod real;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::Matrix;
