//! Autoregressive normalizing flows with three interchangeable samplers:
//! KV-cached sequential decoding, uniform Jacobi decoding, and selective
//! Jacobi decoding (sequential for a chosen set of layers, Jacobi elsewhere).
//!
//! The crate also carries a small maximum-likelihood trainer, synthetic
//! datasets, a binary checkpoint format, and the convergence and redundancy
//! diagnostics used by the `sejd` command-line tool.

pub mod checkpoint;
pub mod conditioner;
pub mod data;
pub mod decode;
pub mod flow;
pub mod numerics;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use conditioner::{Conditioner, ConditionerHyper, ConditionerParams, IdentityConditioner, KvCache, PrefixSum};
pub use decode::{decode, DecodeConfig, DecodeMode};
pub use flow::FlowModel;
pub use numerics::{Matrix, Real, Rng};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cosine similarity is undefined for a zero-norm input")]
    UndefinedSimilarity,
    #[error("kv cache holds {cached} positions but the prefix has {prefix} rows")]
    CacheDesync { cached: usize, prefix: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
