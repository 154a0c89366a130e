//! Random dense and sparse inputs, and a batch source that combines them
//! with labels.

use serde::{Deserialize, Serialize};

use super::trace::{TraceGenerator, TraceProfile};
use crate::dense::{Matrix, RngStream};
use crate::embedding::{offsets_from_lengths, SparseBatch};
use crate::error::{Error, Result};
use crate::model::{Batch, DlrmConfig, DlrmModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenseDistribution {
    /// `U[0, 1)`.
    #[default]
    Uniform,
    /// Standard normal.
    Normal,
}

/// One embedding table's lookup pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    /// Table rows `m`; indices fall in `[0, m)`.
    pub rows: usize,
    /// Lookups per sample `k`: exactly `k` when `fixed`, else uniform in `[1, k]`.
    pub indices_per_lookup: usize,
    pub fixed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomDataSpec {
    pub batch_size: usize,
    pub dense_dim: usize,
    pub distribution: DenseDistribution,
    pub tables: Vec<TableSpec>,
    pub seed: u64,
}

impl RandomDataSpec {
    /// Spec matching a model config, every table sharing `k` and the mode.
    pub fn for_config(
        config: &DlrmConfig,
        batch_size: usize,
        indices_per_lookup: usize,
        fixed: bool,
        seed: u64,
    ) -> Self {
        Self {
            batch_size,
            dense_dim: config.dense_dim(),
            distribution: DenseDistribution::Uniform,
            tables: config
                .embedding_sizes
                .iter()
                .map(|&rows| TableSpec {
                    rows,
                    indices_per_lookup,
                    fixed,
                })
                .collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.dense_dim == 0 {
            return Err(Error::Config("dense dimension must be positive".into()));
        }
        for (t, spec) in self.tables.iter().enumerate() {
            if spec.rows == 0 || spec.indices_per_lookup == 0 {
                return Err(Error::Config(format!(
                    "table {t}: rows and indices per lookup must be positive"
                )));
            }
            if spec.indices_per_lookup > spec.rows {
                return Err(Error::Config(format!(
                    "table {t}: {} indices per lookup exceed its {} rows",
                    spec.indices_per_lookup, spec.rows
                )));
            }
        }
        Ok(())
    }

    fn table(&self, index: usize) -> Result<&TableSpec> {
        self.validate()?;
        self.tables.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "table {index} requested but the spec has {}",
                self.tables.len()
            ))
        })
    }
}

/// `batch_size × dense_dim` dense features.
pub fn gen_dense_batch(spec: &RandomDataSpec, rng: &mut RngStream) -> Matrix {
    match spec.distribution {
        DenseDistribution::Uniform => rng.uniform(spec.batch_size, spec.dense_dim),
        DenseDistribution::Normal => rng.normal(spec.batch_size, spec.dense_dim),
    }
}

fn segment_lengths(table: &TableSpec, batch: usize, rng: &mut RngStream) -> Vec<usize> {
    (0..batch)
        .map(|_| {
            if table.fixed {
                table.indices_per_lookup
            } else {
                rng.in_range(1, table.indices_per_lookup)
            }
        })
        .collect()
}

/// Multi-hot lookups for one table with indices uniform over `[0, m)`.
/// Indices within a segment are drawn with replacement.
pub fn gen_sparse_batch(spec: &RandomDataSpec, table_index: usize, rng: &mut RngStream) -> Result<SparseBatch> {
    let table = *spec.table(table_index)?;
    let lengths = segment_lengths(&table, spec.batch_size, rng);
    let total: usize = lengths.iter().sum();
    let indices = (0..total).map(|_| rng.below(table.rows)).collect();
    SparseBatch::new(offsets_from_lengths(&lengths), indices, None)
}

/// Like [`gen_sparse_batch`], but indices come from a synthetic trace.
pub fn gen_trace_sparse_batch(
    spec: &RandomDataSpec,
    table_index: usize,
    rng: &mut RngStream,
    trace: &mut TraceGenerator,
) -> Result<SparseBatch> {
    let table = *spec.table(table_index)?;
    let lengths = segment_lengths(&table, spec.batch_size, rng);
    let total: usize = lengths.iter().sum();
    let indices = (0..total).map(|_| trace.next_access() as usize).collect();
    let batch = SparseBatch::new(offsets_from_lengths(&lengths), indices, None)?;
    batch.validate(table_index, table.rows)?;
    Ok(batch)
}

/// Where click labels come from.
#[derive(Clone, Debug)]
pub enum LabelSource {
    /// Fair coin flips, independent of the inputs.
    Random,
    /// Bernoulli draws from a fixed model's predicted probability.
    Teacher(Box<DlrmModel>),
}

/// A randomly initialized model whose output layer is scaled by `sharpness`
/// so its probabilities sit away from 0.5, giving labels a learnable signal.
pub fn planted_teacher(config: &DlrmConfig, seed: u64, sharpness: f64) -> Result<DlrmModel> {
    let mut c = config.clone();
    c.seed = seed;
    let mut teacher = DlrmModel::new(c)?;
    if let Some(last) = teacher.top.layers_mut().last_mut() {
        for w in last.weight.as_mut_slice() {
            *w *= sharpness;
        }
    }
    Ok(teacher)
}

enum IndexSource {
    Uniform,
    Traces(Vec<TraceGenerator>),
}

// Substream ids under the data seed.
const DENSE_STREAM: u64 = 1;
const LABEL_STREAM: u64 = 2;
const TABLE_STREAM_BASE: u64 = 1 << 16;
const TRACE_STREAM_BASE: u64 = 1 << 32;

/// Endless source of generated mini-batches.
pub struct GeneratedBatches {
    spec: RandomDataSpec,
    dense_rng: RngStream,
    label_rng: RngStream,
    table_rngs: Vec<RngStream>,
    indices: IndexSource,
    labels: LabelSource,
}

impl GeneratedBatches {
    pub fn random(spec: RandomDataSpec, labels: LabelSource) -> Result<Self> {
        spec.validate()?;
        let root = RngStream::new(spec.seed);
        Ok(Self {
            dense_rng: root.fork(DENSE_STREAM),
            label_rng: root.fork(LABEL_STREAM),
            table_rngs: (0..spec.tables.len())
                .map(|t| root.fork(TABLE_STREAM_BASE + t as u64))
                .collect(),
            indices: IndexSource::Uniform,
            labels,
            spec,
        })
    }

    /// Sparse indices drawn from one synthetic trace per table.
    pub fn synthetic(spec: RandomDataSpec, profiles: &[TraceProfile], labels: LabelSource) -> Result<Self> {
        if profiles.len() != spec.tables.len() {
            return Err(Error::LengthMismatch {
                op: "trace profiles",
                left: profiles.len(),
                right: spec.tables.len(),
            });
        }
        let root = RngStream::new(spec.seed);
        let mut gens = Vec::with_capacity(profiles.len());
        for (t, (p, table)) in profiles.iter().zip(&spec.tables).enumerate() {
            if p.is_empty() {
                return Err(Error::Config(format!("trace profile for table {t} has no accesses")));
            }
            if let Some(&bad) = p.unique().iter().find(|&&u| u >= table.rows as u64) {
                return Err(Error::Config(format!(
                    "trace profile for table {t} references row {bad} but the table has {} rows",
                    table.rows
                )));
            }
            gens.push(TraceGenerator::new(p, root.fork(TRACE_STREAM_BASE + t as u64))?);
        }
        let mut out = Self::random(spec, labels)?;
        out.indices = IndexSource::Traces(gens);
        Ok(out)
    }

    pub fn spec(&self) -> &RandomDataSpec {
        &self.spec
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let dense = gen_dense_batch(&self.spec, &mut self.dense_rng);
        let mut sparse = Vec::with_capacity(self.spec.tables.len());
        for (t, rng) in self.table_rngs.iter_mut().enumerate() {
            sparse.push(match &mut self.indices {
                IndexSource::Uniform => gen_sparse_batch(&self.spec, t, rng)?,
                IndexSource::Traces(g) => gen_trace_sparse_batch(&self.spec, t, rng, &mut g[t])?,
            });
        }
        let labels = match &self.labels {
            LabelSource::Random => (0..self.spec.batch_size)
                .map(|_| f64::from(self.label_rng.next_f64() < 0.5))
                .collect(),
            LabelSource::Teacher(teacher) => teacher
                .predict(&dense, &sparse)?
                .into_iter()
                .map(|p| f64::from(self.label_rng.next_f64() < p))
                .collect(),
        };
        Ok(Batch { dense, sparse, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Interaction;

    fn spec(batch: usize, rows: usize, k: usize, fixed: bool) -> RandomDataSpec {
        RandomDataSpec {
            batch_size: batch,
            dense_dim: 3,
            distribution: DenseDistribution::Uniform,
            tables: vec![TableSpec {
                rows,
                indices_per_lookup: k,
                fixed,
            }],
            seed: 1,
        }
    }

    #[test]
    fn dense_shape_range_and_determinism() {
        let s = spec(4, 10, 2, true);
        let a = gen_dense_batch(&s, &mut RngStream::new(5));
        assert_eq!(a.shape(), (4, 3));
        assert!(a.as_slice().iter().all(|&v| (0.0..1.0).contains(&v)));
        let b = gen_dense_batch(&s, &mut RngStream::new(5));
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let n = gen_dense_batch(
            &RandomDataSpec {
                distribution: DenseDistribution::Normal,
                ..s
            },
            &mut RngStream::new(5),
        );
        assert!(n.as_slice().iter().any(|&v| v < 0.0));
    }

    #[test]
    fn sparse_modes() {
        let fixed = gen_sparse_batch(&spec(20, 10, 1, true), 0, &mut RngStream::new(1)).unwrap();
        assert!(fixed.lengths().iter().all(|&l| l == 1));
        let ranged = gen_sparse_batch(&spec(200, 10, 4, false), 0, &mut RngStream::new(2)).unwrap();
        let lens = ranged.lengths();
        assert!(lens.iter().all(|l| (1..=4).contains(l)));
        assert!(lens.contains(&1) && lens.contains(&4));
        assert!(ranged.indices().iter().all(|&i| i < 10));
    }

    #[test]
    fn sparse_batch_is_valid() {
        let b = gen_sparse_batch(&spec(3, 6, 3, false), 0, &mut RngStream::new(11)).unwrap();
        assert_eq!(b.num_segments(), 3);
        b.validate(0, 6).unwrap();
        assert_eq!(b.offsets(), &offsets_from_lengths(&b.lengths())[..]);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(gen_sparse_batch(&spec(3, 2, 3, true), 0, &mut RngStream::new(0)).is_err());
        assert!(gen_sparse_batch(&spec(3, 6, 0, true), 0, &mut RngStream::new(0)).is_err());
        assert!(gen_sparse_batch(&spec(0, 6, 1, true), 0, &mut RngStream::new(0)).is_err());
        assert!(gen_sparse_batch(&spec(3, 6, 1, true), 1, &mut RngStream::new(0)).is_err());
    }

    fn toy() -> DlrmConfig {
        DlrmConfig {
            embedding_sizes: vec![7, 5],
            sparse_dim: 3,
            bottom_mlp: vec![4, 3],
            top_mlp: vec![4, 1],
            interaction: Interaction::Dot,
            seed: 0,
        }
    }

    #[test]
    fn generated_batches_are_reproducible() {
        let s = RandomDataSpec::for_config(&toy(), 8, 2, false, 42);
        let mut a = GeneratedBatches::random(s.clone(), LabelSource::Random).unwrap();
        let mut b = GeneratedBatches::random(s, LabelSource::Random).unwrap();
        for _ in 0..3 {
            let (x, y) = (a.next_batch().unwrap(), b.next_batch().unwrap());
            assert_eq!(x.sparse, y.sparse);
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.dense.as_slice(), y.dense.as_slice());
        }
    }

    #[test]
    fn teacher_labels_follow_its_predictions() {
        let config = toy();
        let teacher = planted_teacher(&config, 3, 8.0).unwrap();
        let s = RandomDataSpec::for_config(&config, 2000, 2, false, 4);
        let mut src = GeneratedBatches::random(s, LabelSource::Teacher(Box::new(teacher.clone()))).unwrap();
        let b = src.next_batch().unwrap();
        let p = teacher.predict(&b.dense, &b.sparse).unwrap();
        let mean_p = p.iter().sum::<f64>() / p.len() as f64;
        let mean_y = b.labels.iter().sum::<f64>() / b.labels.len() as f64;
        assert!((mean_p - mean_y).abs() < 0.05, "{mean_p} vs {mean_y}");
        assert!(b.labels.iter().all(|&y| y == 0.0 || y == 1.0));
    }

    #[test]
    fn synthetic_indices_come_from_profiles() {
        let config = toy();
        let s = RandomDataSpec::for_config(&config, 16, 2, true, 5);
        let profiles = vec![
            TraceProfile::new(vec![6, 2], [(0, 0.5), (1, 0.5)].into()).unwrap(),
            TraceProfile::new(vec![4], [(0, 0.5), (1, 0.5)].into()).unwrap(),
        ];
        let mut src = GeneratedBatches::synthetic(s.clone(), &profiles, LabelSource::Random).unwrap();
        let b = src.next_batch().unwrap();
        assert!(b.sparse[0].indices().iter().all(|&i| i == 6 || i == 2));
        assert!(b.sparse[1].indices().iter().all(|&i| i == 4));

        let too_big = vec![profiles[0].clone(), TraceProfile::new(vec![5], [(0, 1.0)].into()).unwrap()];
        assert!(GeneratedBatches::synthetic(s.clone(), &too_big, LabelSource::Random).is_err());
        assert!(GeneratedBatches::synthetic(s, &profiles[..1], LabelSource::Random).is_err());
    }
}
