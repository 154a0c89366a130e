//! Dense row-major matrices, activations and seeded random streams.
//!
//! Every reduction in this module sums in ascending index order, starting
//! from `0.0`. The parallel simulator relies on that: splitting a batch across
//! devices must not change a single bit of the result.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A 1×n row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// An n×1 column vector.
    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copies rows `range` into a new matrix.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Matrix {
        Matrix {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::shape("vstack", (rows, cols), m.shape()));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `self · other`, each entry summed over ascending `k`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "{:?}", self.row(i))?;
            if i + 1 < self.rows {
                write!(f, ", ")?;
            }
        }
        if self.rows > 8 {
            write!(f, "...")?;
        }
        write!(f, "]")
    }
}

/// `c += op(a) · b` where `op(a)` is `m×k` and read through strides.
///
/// Entry `c[i][j]` receives its `k` products in ascending `k`, so starting
/// from a zero `c` reproduces the textbook triple loop bit for bit, and
/// starting from a partial sum continues it exactly. Tiling only changes
/// which entries are in flight together, never the order within one entry,
/// and the products and sums stay separate roundings (no fused multiply-add),
/// so the wide-vector path gives the same bits as the portable one.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    a_row_stride: usize,
    a_col_stride: usize,
    b: &[f64],
    c: &mut [f64],
) {
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at run time.
        unsafe { gemm_acc_avx2(m, n, k, a, a_row_stride, a_col_stride, b, c) };
        return;
    }
    gemm_tiled(m, n, k, a, a_row_stride, a_col_stride, b, c);
}

#[cfg(target_arch = "x86_64")]
#[allow(clippy::too_many_arguments)]
#[target_feature(enable = "avx2")]
unsafe fn gemm_acc_avx2(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    a_row_stride: usize,
    a_col_stride: usize,
    b: &[f64],
    c: &mut [f64],
) {
    gemm_tiled(m, n, k, a, a_row_stride, a_col_stride, b, c);
}

// Register tile, and the depth/row blocks that keep packed panels in cache.
const MR: usize = 4;
const NR: usize = 8;
const KC: usize = 256;
const MC: usize = 128;

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_tiled(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    a_row_stride: usize,
    a_col_stride: usize,
    b: &[f64],
    c: &mut [f64],
) {
    let n_panels = n.div_ceil(NR);
    let mut bpack = vec![0.0; KC.min(k) * n_panels * NR];
    let mut apack = vec![0.0; KC.min(k) * MC.min(m).div_ceil(MR) * MR];
    for k0 in (0..k).step_by(KC) {
        let kc = KC.min(k - k0);
        // Panel p holds columns p*NR.., laid out depth-major, zero padded.
        for p in 0..n_panels {
            let j0 = p * NR;
            let w = NR.min(n - j0);
            for kk in 0..kc {
                let dst = &mut bpack[(p * kc + kk) * NR..][..NR];
                dst[..w].copy_from_slice(&b[(k0 + kk) * n + j0..][..w]);
                dst[w..].fill(0.0);
            }
        }
        for i0 in (0..m).step_by(MC) {
            let mc = MC.min(m - i0);
            let a_panels = mc.div_ceil(MR);
            for q in 0..a_panels {
                for kk in 0..kc {
                    let dst = &mut apack[(q * kc + kk) * MR..][..MR];
                    for (r, d) in dst.iter_mut().enumerate() {
                        let i = q * MR + r;
                        *d = if i < mc {
                            a[(i0 + i) * a_row_stride + (k0 + kk) * a_col_stride]
                        } else {
                            0.0
                        };
                    }
                }
            }
            for p in 0..n_panels {
                let j0 = p * NR;
                let w = NR.min(n - j0);
                let bp = &bpack[p * kc * NR..][..kc * NR];
                for q in 0..a_panels {
                    let r0 = i0 + q * MR;
                    let h = MR.min(i0 + mc - r0);
                    let ap = &apack[q * kc * MR..][..kc * MR];
                    let mut acc = [[0.0f64; NR]; MR];
                    for (r, row) in acc.iter_mut().enumerate().take(h) {
                        row[..w].copy_from_slice(&c[(r0 + r) * n + j0..][..w]);
                    }
                    for kk in 0..kc {
                        let av: [f64; MR] = ap[kk * MR..kk * MR + MR].try_into().unwrap();
                        let bv: [f64; NR] = bp[kk * NR..kk * NR + NR].try_into().unwrap();
                        for r in 0..MR {
                            for j in 0..NR {
                                acc[r][j] += av[r] * bv[j];
                            }
                        }
                    }
                    for (r, row) in acc.iter().enumerate().take(h) {
                        c[(r0 + r) * n + j0..][..w].copy_from_slice(&row[..w]);
                    }
                }
            }
        }
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_acc(a.rows, b.cols, a.cols, &a.data, a.cols, 1, &b.data, &mut out.data);
    Ok(out)
}

/// `acc += aᵀ · b`, continuing whatever partial sums `acc` already holds.
///
/// Used for weight gradients: the sum runs over the shared row (sample)
/// dimension in ascending order, so feeding consecutive row ranges one after
/// another gives exactly the same bits as one call on the full range.
pub fn matmul_tn_accumulate(acc: &mut Matrix, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows != b.rows || acc.shape() != (a.cols, b.cols) {
        return Err(Error::shape("matmul_tn_accumulate", a.shape(), b.shape()));
    }
    gemm_acc(a.cols, b.cols, a.rows, &a.data, 1, a.cols, &b.data, &mut acc.data);
    Ok(())
}

/// `a · bᵀ` with ascending summation.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    matmul(a, &b.transpose())
}

pub fn dot(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch {
            op: "dot",
            left: u.len(),
            right: v.len(),
        });
    }
    Ok(dot_unchecked(u, v))
}

#[inline]
pub(crate) fn dot_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in u.iter().zip(v) {
        acc += a * b;
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activation(x: &Matrix, kind: Activation) -> Matrix {
    map(x, |v| kind.apply(v))
}

pub fn activation_grad(x: &Matrix, kind: Activation) -> Matrix {
    map(x, |v| kind.derivative(v))
}

fn map(x: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

/// Seeded random stream backed by ChaCha8.
///
/// ChaCha8 output is specified bit-for-bit independent of platform, and the
/// 64-bit stream id gives cheap independent substreams from one seed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, rng }
    }

    /// An independent stream derived from this stream's seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    #[inline]
    pub fn in_range(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.next_f64()).collect();
        Matrix { rows, cols, data }
    }

    pub fn normal(&mut self, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| self.next_normal()).collect();
        Matrix { rows, cols, data }
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, l in 1usize..6, n in 1usize..6) {
            let mut rng = RngStream::new(seed);
            let a = rng.normal(m, k);
            let b = rng.normal(k, l);
            let c = rng.normal(l, n);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }
}
