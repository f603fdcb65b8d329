//! Deterministic training and retrieval toolkit for forward-compatible
//! embedding model updates.
//!
//! An embedding model that indexes a gallery cannot normally be replaced
//! without re-embedding every stored record. This crate implements the
//! alternative: store a small side-information vector next to each old
//! embedding, then train a transformation that maps (old embedding,
//! side-information) into the new model's space so the gallery can be
//! upgraded without touching the original inputs.
//!
//! Everything is built for reproducibility studies at toy scale: plain
//! `f64` math on row-major matrices, explicit backward passes, seeded
//! ChaCha8 randomness, and bit-identical reruns on the same platform.

pub mod models;
pub mod numerics;
pub mod retrieval;
pub mod synthdata;
pub mod training;
pub mod update;

/// Unified error type for the toolkit.
///
/// Variants map onto the failure classes the APIs promise to detect:
/// shape and dimension mismatches, invalid configurations, call-order
/// violations, batches or inputs too degenerate to process, non-finite
/// numbers, and gallery versioning faults.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("gallery has no usable records")]
    EmptyGallery,
    #[error("version regression: gallery is at version {gallery}, plan expects {expected}")]
    VersionRegression { gallery: u32, expected: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;
