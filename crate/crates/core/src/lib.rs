//! Event-enhanced retrieval: dual-tower encoders with an auxiliary
//! event-generation decoder, trained on synthetic title/query corpora.
//!
//! The crate is generic over the scalar type (`f32`/`f64`) via [`Scalar`];
//! the `*32`/`*64` aliases at the root pick a concrete precision.

pub mod corpus;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod mining;
pub mod model;
pub mod retrieval;
pub mod scalar;
pub mod textproc;
pub mod trainer;
pub mod util;

pub use scalar::{PackedScalar, Scalar};

/// Training-precision graph.
pub type Graph32 = graph::Graph<f32>;
/// Verification-precision graph (gradient checks, oracles).
pub type Graph64 = graph::Graph<f64>;
