//! Second-order factorization machine, used as a reference predictor for the
//! interaction design.

use crate::dense::{dot_unchecked, matmul_nt, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FmParams {
    pub bias: f64,
    pub linear: Vec<f64>,
    /// `n × d` latent factors, one row per input coordinate.
    pub factors: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmPath {
    /// Materializes the strictly upper triangle of `V Vᵀ`. O(n²d).
    Naive,
    /// `½(‖Vᵀx‖² − Σ x_i²‖v_i‖²)`. O(nd).
    Factorized,
}

impl FmParams {
    pub fn new(bias: f64, linear: Vec<f64>, factors: Matrix) -> Result<Self> {
        if linear.len() != factors.rows() {
            return Err(Error::LengthMismatch {
                op: "fm params",
                left: linear.len(),
                right: factors.rows(),
            });
        }
        Ok(Self {
            bias,
            linear,
            factors,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.linear.len()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.linear.len() {
            return Err(Error::LengthMismatch {
                op: "fm_predict",
                left: x.len(),
                right: self.linear.len(),
            });
        }
        Ok(())
    }
}

pub fn fm_predict(p: &FmParams, x: &[f64], path: FmPath) -> Result<f64> {
    p.check(x)?;
    let pairwise = match path {
        FmPath::Naive => pairwise_naive(p, x)?,
        FmPath::Factorized => pairwise_factorized(p, x),
    };
    Ok(p.bias + dot_unchecked(&p.linear, x) + pairwise)
}

fn pairwise_naive(p: &FmParams, x: &[f64]) -> Result<f64> {
    let gram = matmul_nt(&p.factors, &p.factors)?;
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            acc += x[i] * gram.get(i, j) * x[j];
        }
    }
    Ok(acc)
}

fn pairwise_factorized(p: &FmParams, x: &[f64]) -> f64 {
    let d = p.factors.cols();
    let mut projected = vec![0.0; d];
    let mut diagonal = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        let v = p.factors.row(i);
        for (q, &vk) in projected.iter_mut().zip(v) {
            *q += xi * vk;
        }
        diagonal += xi * xi * dot_unchecked(v, v);
    }
    0.5 * (dot_unchecked(&projected, &projected) - diagonal)
}
