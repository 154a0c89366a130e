//! Pairwise dot-product feature interaction.
//!
//! Per sample the features are `z0` (the processed dense vector) followed by
//! one pooled embedding per table. The output is the dense vector itself
//! followed by `z_i · z_j` for every `i < j`, pairs in row-major order:
//! `(0,1), (0,2), …, (0,n−1), (1,2), …`.

use crate::dense::{dot_unchecked, Matrix};
use crate::error::{Error, Result};

/// Width of the interaction output for `num_features` vectors of length `dim`.
pub fn interaction_width(dim: usize, num_features: usize) -> usize {
    dim + num_features * num_features.saturating_sub(1) / 2
}

fn check_inputs(dense: &Matrix, emb: &[Matrix]) -> Result<()> {
    for e in emb {
        if e.shape() != dense.shape() {
            return Err(Error::shape("interact", dense.shape(), e.shape()));
        }
    }
    Ok(())
}

#[inline]
fn feature<'a>(dense: &'a Matrix, emb: &'a [Matrix], f: usize, s: usize) -> &'a [f64] {
    if f == 0 {
        dense.row(s)
    } else {
        emb[f - 1].row(s)
    }
}

pub fn interact(dense: &Matrix, emb: &[Matrix]) -> Result<Matrix> {
    check_inputs(dense, emb)?;
    let (batch, d) = dense.shape();
    let nf = emb.len() + 1;
    let mut out = Matrix::zeros(batch, interaction_width(d, nf));
    for s in 0..batch {
        let row = out.row_mut(s);
        row[..d].copy_from_slice(dense.row(s));
        let mut p = d;
        for i in 0..nf {
            let zi = feature(dense, emb, i, s);
            for j in i + 1..nf {
                row[p] = dot_unchecked(zi, feature(dense, emb, j, s));
                p += 1;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`interact`]. Returns the gradient for the dense input and for
/// each embedding input.
pub fn interact_backward(
    dense: &Matrix,
    emb: &[Matrix],
    grad_out: &Matrix,
) -> Result<(Matrix, Vec<Matrix>)> {
    check_inputs(dense, emb)?;
    let (batch, d) = dense.shape();
    let nf = emb.len() + 1;
    let width = interaction_width(d, nf);
    if grad_out.shape() != (batch, width) {
        return Err(Error::shape("interact_backward", grad_out.shape(), (batch, width)));
    }

    let mut grads: Vec<Matrix> = (0..nf).map(|_| Matrix::zeros(batch, d)).collect();
    for s in 0..batch {
        let g = grad_out.row(s);
        grads[0].row_mut(s).copy_from_slice(&g[..d]);
        let mut p = d;
        for i in 0..nf {
            for j in i + 1..nf {
                let gij = g[p];
                p += 1;
                if gij == 0.0 {
                    continue;
                }
                let zj = feature(dense, emb, j, s);
                for (acc, v) in grads[i].row_mut(s).iter_mut().zip(zj) {
                    *acc += gij * v;
                }
                let zi = feature(dense, emb, i, s);
                for (acc, v) in grads[j].row_mut(s).iter_mut().zip(zi) {
                    *acc += gij * v;
                }
            }
        }
    }
    let grad_dense = grads.remove(0);
    Ok((grad_dense, grads))
}
