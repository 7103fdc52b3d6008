//! Geometry toolkit for paired image/text embeddings: storage, centroid gap
//! and cone statistics, λ-alignment, linear probing, sweeps and synthetic
//! simulations.

pub mod conesim;
pub mod embedstore;
pub mod error;
pub mod fsutil;
pub mod geometry;
pub mod numeric;
pub mod probe;
pub mod sweep;

pub use error::{GapError, Result};

/// Version string stamped into every JSON artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
