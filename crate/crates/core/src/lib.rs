//! Post-embedding fingerprint pipeline: compact templates, exhaustive and
//! product-quantized top-k search, minutiae re-ranking, and the minutiae-map
//! codec.

mod codec;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gallery;
pub mod kmeans;
pub mod matcher;
pub mod minutiae;
pub mod pq;
pub mod rerank;
pub mod search;
pub mod synth;
pub mod template;
pub mod topk;

pub use error::{Error, Result};
