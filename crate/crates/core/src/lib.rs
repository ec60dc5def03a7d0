//! Parallel-corpus mining with a bidirectional dual-encoder: tokenization and
//! synthetic corpora, a reverse-mode tape over dense matrices, shared-weight
//! sentence encoders, additive-margin training objectives, an SGD trainer,
//! exact and clustered nearest-neighbor indexes, the mining pipeline, and
//! evaluation metrics.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod index;
pub mod metrics;
pub mod miner;
pub mod objective;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
