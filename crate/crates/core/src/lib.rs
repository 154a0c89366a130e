//! Deep learning recommendation model (DLRM) kernels and tooling.
//!
//! - [`dense`]: row-major matrices, activations, seeded random streams
//! - [`embedding`]: embedding tables and pooled offsets/indices lookups
//! - [`model`]: MLPs, dot-product interaction, the assembled model, a
//!   factorization-machine reference predictor and parameter counting
//! - [`optim`]: SGD and Adagrad with sparse row updates for tables
//! - [`datagen`]: random batches, stack-distance trace profiling/synthesis,
//!   LRU hit rates and Criteo record parsing
//! - [`parallel`]: in-process simulation of model-parallel embeddings with
//!   data-parallel MLPs
//! - [`checkpoint`]: binary model snapshots with a text header
//! - [`cli`]: argument parsing, training/benchmark loops and reports behind
//!   the `dlrm` binary

pub mod checkpoint;
pub mod cli;
pub mod datagen;
pub mod dense;
pub mod embedding;
pub mod error;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod profile;
pub mod train;

pub use dense::{Activation, Matrix, RngStream};
pub use embedding::{EmbeddingTable, SparseBatch, SparseGrad};
pub use error::{Error, Result};
pub use model::{Batch, DlrmConfig, DlrmModel};
pub use optim::{ModelOptimizer, Optimizer};
