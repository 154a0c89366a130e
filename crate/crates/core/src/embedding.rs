//! Embedding tables and pooled lookups in the offsets/indices layout.
//!
//! A mini-batch of `t` multi-hot lookups is stored CSR style: segment `j`
//! covers `indices[offsets[j]..offsets[j + 1]]`, so `offsets` carries `t + 1`
//! entries including the terminal `offsets[t] == indices.len()`. Indices are
//! 0-based row ids in `[0, m)`.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dense::{Matrix, RngStream};
use crate::error::{Error, Result};

/// An `m × d` table whose rows are the embedding vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    id: usize,
    weights: Matrix,
}

impl EmbeddingTable {
    pub fn new(id: usize, weights: Matrix) -> Self {
        Self { id, weights }
    }

    pub fn zeros(id: usize, rows: usize, dim: usize) -> Self {
        Self::new(id, Matrix::zeros(rows, dim))
    }

    /// Rows drawn uniformly from `(-1/√d, 1/√d)`.
    pub fn random(id: usize, rows: usize, dim: usize, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (dim.max(1) as f64).sqrt();
        let mut w = rng.uniform(rows, dim);
        for v in w.as_mut_slice() {
            *v = (2.0 * *v - 1.0) * bound;
        }
        Self::new(id, w)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn num_rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.weights.row(r)
    }

    /// Pooled sum lookup, see [`lookup_batch`].
    pub fn lookup(&self, batch: &SparseBatch) -> Result<Matrix> {
        lookup_batch(self, batch)
    }
}

/// A mini-batch of multi-hot lookups against one table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseBatch {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Option<Vec<f64>>,
}

impl SparseBatch {
    pub fn new(offsets: Vec<usize>, indices: Vec<usize>, weights: Option<Vec<f64>>) -> Result<Self> {
        if offsets.first() != Some(&0) {
            return Err(Error::InvalidBatch("offsets must start with 0".into()));
        }
        if let Some(pos) = offsets.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::InvalidBatch(format!(
                "offsets decrease at position {}",
                pos + 1
            )));
        }
        let last = *offsets.last().unwrap_or(&0);
        if last != indices.len() {
            return Err(Error::InvalidBatch(format!(
                "terminal offset {last} does not match {} indices",
                indices.len()
            )));
        }
        if let Some(w) = &weights {
            if w.len() != indices.len() {
                return Err(Error::InvalidBatch(format!(
                    "{} per-index weights for {} indices",
                    w.len(),
                    indices.len()
                )));
            }
        }
        Ok(Self {
            offsets,
            indices,
            weights,
        })
    }

    pub fn from_lengths(lengths: &[usize], indices: Vec<usize>) -> Result<Self> {
        Self::new(offsets_from_lengths(lengths), indices, None)
    }

    /// Encodes one index list per sample.
    pub fn from_lookups<L: AsRef<[usize]>>(lookups: &[L]) -> Self {
        let lengths: Vec<usize> = lookups.iter().map(|l| l.as_ref().len()).collect();
        let indices = lookups.iter().flat_map(|l| l.as_ref().iter().copied()).collect();
        Self {
            offsets: offsets_from_lengths(&lengths),
            indices,
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.indices.len() {
            return Err(Error::InvalidBatch(format!(
                "{} per-index weights for {} indices",
                weights.len(),
                self.indices.len()
            )));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn lengths(&self) -> Vec<usize> {
        lengths_from_offsets(&self.offsets)
    }

    /// Number of lookups (samples) `t`.
    pub fn num_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn segment(&self, j: usize) -> Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    /// Index lists per sample, the inverse of [`SparseBatch::from_lookups`].
    pub fn lookups(&self) -> Vec<Vec<usize>> {
        (0..self.num_segments())
            .map(|j| self.indices[self.segment(j)].to_vec())
            .collect()
    }

    #[inline]
    fn weight(&self, k: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[k])
    }

    /// Checks every index against a table of `rows` rows.
    pub fn validate(&self, table: usize, rows: usize) -> Result<()> {
        match self.indices.iter().position(|&i| i >= rows) {
            Some(position) => Err(Error::IndexOutOfRange {
                table,
                position,
                index: self.indices[position],
                rows,
            }),
            None => Ok(()),
        }
    }

    /// Samples `range` as a standalone batch.
    pub fn slice(&self, range: Range<usize>) -> SparseBatch {
        let lo = self.offsets[range.start];
        let hi = self.offsets[range.end];
        SparseBatch {
            offsets: self.offsets[range.start..=range.end]
                .iter()
                .map(|o| o - lo)
                .collect(),
            indices: self.indices[lo..hi].to_vec(),
            weights: self.weights.as_ref().map(|w| w[lo..hi].to_vec()),
        }
    }
}

/// Prefix sums with a leading 0: `{2,3,1}` becomes `{0,2,5,6}`.
pub fn offsets_from_lengths(lengths: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(lengths.len() + 1);
    let mut acc = 0;
    offsets.push(acc);
    for &l in lengths {
        acc += l;
        offsets.push(acc);
    }
    offsets
}

pub fn lengths_from_offsets(offsets: &[usize]) -> Vec<usize> {
    offsets.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Sum-pooled lookup: row `j` of the result is the weighted sum of the table
/// rows named by segment `j`, accumulated in index order. Empty segments give
/// zero rows.
pub fn lookup_batch(table: &EmbeddingTable, batch: &SparseBatch) -> Result<Matrix> {
    batch.validate(table.id, table.num_rows())?;
    let d = table.dim();
    let mut out = Matrix::zeros(batch.num_segments(), d);
    for j in 0..batch.num_segments() {
        let row = out.row_mut(j);
        for k in batch.segment(j) {
            let a = batch.weight(k);
            let w = table.row(batch.indices[k]);
            for (o, &v) in row.iter_mut().zip(w) {
                *o += v * a;
            }
        }
    }
    Ok(out)
}

/// Row-sparse gradient of an embedding table. Rows are sorted ascending and
/// unique; `values` holds one `dim`-vector per listed row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad {
    dim: usize,
    rows: Vec<usize>,
    values: Vec<f64>,
}

impl SparseGrad {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.dim.max(1)))
    }

    pub fn get(&self, row: usize) -> Option<&[f64]> {
        self.rows
            .binary_search(&row)
            .ok()
            .map(|i| &self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn to_dense(&self, num_rows: usize) -> Matrix {
        let mut out = Matrix::zeros(num_rows, self.dim);
        for (r, v) in self.iter() {
            out.row_mut(r).copy_from_slice(v);
        }
        out
    }
}

/// Adjoint of [`lookup_batch`]: row `r` collects `grad_out[j] · a_k` for every
/// position `k` in segment `j` with `indices[k] == r`, in ascending `k`.
/// Rows never referenced get no entry.
pub fn lookup_backward(
    table: &EmbeddingTable,
    batch: &SparseBatch,
    grad_out: &Matrix,
) -> Result<SparseGrad> {
    let d = table.dim();
    if grad_out.shape() != (batch.num_segments(), d) {
        return Err(Error::shape(
            "lookup_backward",
            grad_out.shape(),
            (batch.num_segments(), d),
        ));
    }
    batch.validate(table.id, table.num_rows())?;

    let mut slot_of: HashMap<usize, usize> = HashMap::new();
    let mut slot_rows: Vec<usize> = Vec::new();
    let mut slot_vals: Vec<f64> = Vec::new();
    for j in 0..batch.num_segments() {
        let g = grad_out.row(j);
        for k in batch.segment(j) {
            let r = batch.indices[k];
            let slot = *slot_of.entry(r).or_insert_with(|| {
                slot_rows.push(r);
                slot_vals.resize(slot_vals.len() + d, 0.0);
                slot_rows.len() - 1
            });
            let a = batch.weight(k);
            for (acc, &gv) in slot_vals[slot * d..(slot + 1) * d].iter_mut().zip(g) {
                *acc += gv * a;
            }
        }
    }

    let mut order: Vec<usize> = (0..slot_rows.len()).collect();
    order.sort_unstable_by_key(|&s| slot_rows[s]);
    let mut rows = Vec::with_capacity(order.len());
    let mut values = Vec::with_capacity(slot_vals.len());
    for s in order {
        rows.push(slot_rows[s]);
        values.extend_from_slice(&slot_vals[s * d..(s + 1) * d]);
    }
    Ok(SparseGrad { dim: d, rows, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn footnote_table() -> EmbeddingTable {
        let w = Matrix::from_rows(&[
            [1.0, 0.0],
            [0.0, 1.0],
            [2.0, 2.0],
            [3.0, 3.0],
            [-7.0, 9.5],
            [1.0, 1.0],
        ])
        .unwrap();
        EmbeddingTable::new(0, w)
    }

    #[test]
    fn offsets_examples() {
        assert_eq!(offsets_from_lengths(&[2, 3, 1]), vec![0, 2, 5, 6]);
        assert_eq!(offsets_from_lengths(&[]), vec![0]);
        assert_eq!(offsets_from_lengths(&[0, 0, 4]), vec![0, 0, 0, 4]);
        assert_eq!(lengths_from_offsets(&[0, 2, 5, 6]), vec![2, 3, 1]);
    }

    #[test]
    fn batch_validation() {
        assert!(SparseBatch::new(vec![1, 2], vec![0], None).is_err());
        assert!(SparseBatch::new(vec![0, 2, 1], vec![0], None).is_err());
        assert!(SparseBatch::new(vec![0, 1], vec![0, 1], None).is_err());
        assert!(SparseBatch::new(vec![0, 2], vec![0, 1], Some(vec![1.0])).is_err());
        assert!(SparseBatch::new(vec![0], vec![], None).is_ok());
    }

    #[test]
    fn single_index_returns_the_row() {
        let t = footnote_table();
        for i in 0..t.num_rows() {
            let out = t.lookup(&SparseBatch::from_lookups(&[[i]])).unwrap();
            assert_eq!(out.row(0), t.row(i));
        }
    }

    #[test]
    fn footnote_layout_lookup() {
        let t = footnote_table();
        let b = SparseBatch::new(vec![0, 2, 5, 6], vec![0, 2, 0, 1, 5, 3], None).unwrap();
        let out = t.lookup(&b).unwrap();
        assert_eq!(
            out,
            Matrix::from_rows(&[[3.0, 2.0], [2.0, 2.0], [3.0, 3.0]]).unwrap()
        );
    }

    #[test]
    fn zero_weights_and_empty_segments_give_zero_rows() {
        let t = footnote_table();
        let b = SparseBatch::from_lookups(&[vec![0, 2], vec![], vec![4]])
            .with_weights(vec![0.0; 3])
            .unwrap();
        assert_eq!(t.lookup(&b).unwrap(), Matrix::zeros(3, 2));
        let b = SparseBatch::from_lookups(&[vec![], vec![3]]);
        let out = t.lookup(&b).unwrap();
        assert_eq!(out.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn out_of_range_index_reports_table_and_position() {
        let t = EmbeddingTable::zeros(3, 4, 2);
        let b = SparseBatch::from_lookups(&[vec![0, 1], vec![3, 4]]);
        match t.lookup(&b).unwrap_err() {
            Error::IndexOutOfRange {
                table,
                position,
                index,
                rows,
            } => assert_eq!((table, position, index, rows), (3, 3, 4, 4)),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn backward_coalesces_repeated_rows() {
        let t = EmbeddingTable::zeros(0, 5, 2);
        let b = SparseBatch::from_lookups(&[vec![3, 1, 3]]);
        let g = Matrix::from_rows(&[[0.5, -1.0]]).unwrap();
        let sg = lookup_backward(&t, &b, &g).unwrap();
        assert_eq!(sg.rows(), &[1, 3]);
        assert_eq!(sg.get(3).unwrap(), &[1.0, -2.0]);
        assert_eq!(sg.get(1).unwrap(), &[0.5, -1.0]);
        assert!(sg.get(0).is_none());
        assert!(sg.get(2).is_none());
        assert!(sg.get(4).is_none());
    }

    #[test]
    fn backward_shape_mismatch() {
        let t = EmbeddingTable::zeros(0, 5, 2);
        let b = SparseBatch::from_lookups(&[vec![3]]);
        assert!(lookup_backward(&t, &b, &Matrix::zeros(2, 2)).is_err());
        assert!(lookup_backward(&t, &b, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::new(77);
        let mut t = EmbeddingTable::random(0, 5, 3, &mut rng);
        let b = SparseBatch::from_lookups(&[vec![0, 4, 4], vec![2], vec![4, 1]])
            .with_weights(vec![0.5, -1.5, 2.0, 1.0, 0.25, 3.0])
            .unwrap();
        let c = rng.normal(3, 3);
        // loss = <c, lookup(W)>
        let loss = |t: &EmbeddingTable| -> f64 {
            let s = t.lookup(&b).unwrap();
            s.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
        };
        let dense = lookup_backward(&t, &b, &c).unwrap().to_dense(5);
        let h = 1e-6;
        for r in 0..5 {
            for col in 0..3 {
                let orig = t.weights().get(r, col);
                t.weights_mut().set(r, col, orig + h);
                let up = loss(&t);
                t.weights_mut().set(r, col, orig - h);
                let down = loss(&t);
                t.weights_mut().set(r, col, orig);
                let fd = (up - down) / (2.0 * h);
                let an = dense.get(r, col);
                if an == 0.0 {
                    assert!(fd.abs() < 1e-9);
                } else {
                    assert!((fd - an).abs() / an.abs() < 1e-6, "({r},{col}) {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn slice_keeps_segments() {
        let b = SparseBatch::from_lookups(&[vec![0, 2], vec![0, 1, 5], vec![3]]);
        let s = b.slice(1..3);
        assert_eq!(s.offsets(), &[0, 3, 4]);
        assert_eq!(s.lookups(), vec![vec![0, 1, 5], vec![3]]);
    }
}
