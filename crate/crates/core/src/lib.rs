//! Temporal action proposal generation with a relation-aware pyramid network.

pub mod anchors;
pub mod data;
pub mod error;
pub mod eval;
pub mod matching;
pub mod model;
pub mod pipeline;
pub mod postprocess;
pub mod train;

pub use error::{Error, Result};
