//! Moment-matched truncated Gaussian hard instances.
//!
//! Builds the one-dimensional sets `U` and `T`, assembles the planar
//! distribution truncated outside `T × U`, certifies its moments, and samples
//! its high-dimensional embedding.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod gauss;
pub mod instance;
pub mod moment_match;
pub mod piecewise;
pub mod planted;
pub mod reduce;
pub mod sample_io;
pub mod soft;

/// Version tag written into every JSON document.
pub const SCHEMA_VERSION: u32 = 1;

pub use error::{Error, Result};
