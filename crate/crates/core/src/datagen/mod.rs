//! Input data: random and trace-driven synthetic batches, and Criteo records.

pub mod criteo;
pub mod random;
pub mod trace;

pub use criteo::{fnv1a64, parse_criteo, CriteoReader, CriteoSample};
pub use random::{
    gen_dense_batch, gen_sparse_batch, gen_trace_sparse_batch, planted_teacher, DenseDistribution, GeneratedBatches,
    LabelSource, RandomDataSpec, TableSpec,
};
pub use trace::{
    adjust_distribution, default_first_touch_threshold, generate_trace, lru_hit_rate, profile_trace, total_variation,
    profile_path, AccessId, TraceGenerator, TraceProfile,
};
