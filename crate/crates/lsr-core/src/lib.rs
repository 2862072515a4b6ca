//! Learned sparse retrieval toolkit.
//!
//! A desk-scale pipeline for training and evaluating sparse lexical
//! retrievers built from a small transformer encoder with optional
//! bottleneck adapter layers. The pieces:
//!
//! - [`linalg`] / [`tape`]: dense f64 kernels and tape-based reverse-mode
//!   differentiation with a finite-difference checker,
//! - [`encoder`]: the transformer backbone, adapter sublayers, parameter
//!   freezing and counting,
//! - [`sparse`]: the vocabulary term-weight head, log-saturated max
//!   pooling and sparse dot-product scoring,
//! - [`objectives`]: contrastive and margin-distillation losses with
//!   L1/FLOPS sparsity regularizers on a quadratic ramp,
//! - [`trainer`]: Adam training loops, checkpoint selection by MRR@10,
//!   the adapter-layer ablation sweep, hard-negative mining and
//!   domain-adaptation rounds,
//! - [`index`]: an exact inverted index with retrieval-FLOPS accounting,
//! - [`reranker`]: a cross-encoding scorer that can be initialized from
//!   first-stage checkpoints,
//! - [`data`] / [`eval`] / [`synth`]: corpus and run-file I/O, ranking
//!   metrics with significance testing, and a synthetic corpus generator.
//!
//! The `lsr` binary (in `src/bin`) wires these into a command-line
//! pipeline: `gen-synth`, `train`, `distill`, `index`, `search`,
//! `evaluate`, `rerank`, `ablate`, `adapt`, `rflops`, `grad-check`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod index;
pub mod linalg;
pub mod objectives;
pub mod reranker;
pub mod sparse;
pub mod synth;
pub mod tape;
pub mod trainer;
pub mod verify;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible operand shapes (both shapes are named in the message).
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Bad configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),
    /// A malformed line in a data file.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    /// Inconsistent data (id collisions, unresolvable ids, duplicates).
    #[error("{0}")]
    Data(String),
    /// Versioned binary file with a bad magic or unsupported version.
    #[error("file format error: {0}")]
    FileFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
