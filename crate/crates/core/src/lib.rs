//! Clustered federated learning over a simulated wireless edge.
//!
//! Clients hold non-IID shards drawn from a few latent distributions. A
//! parameter tree of cluster models is grown by recursive bipartitioning of
//! client updates, while a latency-aware scheduler decides who trains each
//! round and how uploads share the orthogonal sub-channels.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bound;
pub mod clustering;
pub mod data;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod params;
pub mod scheduling;
pub mod seed;
pub mod wireless;

pub use error::{Error, Result};
pub use params::ParamVector;
