//! Retrieval-augmented anomaly detection over precomputed token embeddings.
//!
//! Templates (normal images) are condensed into a three-level database:
//! class prototypes, per-class semantic prototypes, and instance tokens.
//! Each query patch is matched hierarchically against that database, the
//! matches become a cost volume, and a guided mixture-of-experts filter
//! turns the cost volume into an anomaly map.

pub mod bench;
pub mod clustering;
pub mod database;
pub mod error;
pub mod evaluation;
pub mod filter;
pub mod interchange;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
pub mod synthetic;
pub mod training;

pub use error::{RaidError, Result};
