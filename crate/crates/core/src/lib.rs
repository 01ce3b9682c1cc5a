//! Abundance-aware aggregation of per-sequence embedding sets into fixed-size
//! sample embeddings, plus the downstream pieces needed to use them: trainable
//! attention pooling, classifiers, scoring, dataset handling, a synthetic
//! benchmark generator, and 2-D projection for inspection.

pub mod aggregate;
pub mod classify;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod project;
pub mod setattn;
pub mod synth;

pub use error::{Error, Result};
