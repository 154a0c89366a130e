//! The recommendation model: bottom MLP over dense features, pooled embedding
//! lookups, pairwise dot-product interaction, top MLP and a sigmoid output.

mod config;
mod fm;
mod interaction;
mod mlp;

pub use config::{embedding_param_count, param_count, DlrmConfig, Interaction};
pub use fm::{fm_predict, FmParams, FmPath};
pub use interaction::{interact, interact_backward, interaction_width};
pub use mlp::{Layer, LayerGrads, Mlp, MlpCache, MlpDeltas, MlpGrads};

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::dense::{sigmoid, Activation, Matrix, RngStream};
use crate::embedding::{lookup_backward, EmbeddingTable, SparseBatch, SparseGrad};
use crate::error::{Error, Result};

/// Clamp for the log arguments of the cross-entropy so saturated
/// probabilities give a large finite loss instead of infinity.
const PROB_EPS: f64 = 1e-15;

/// One mini-batch: dense features, one sparse batch per table, {0,1} labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub dense: Matrix,
    pub sparse: Vec<SparseBatch>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.dense.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.dense.rows() == 0
    }

    pub fn slice(&self, range: Range<usize>) -> Batch {
        Batch {
            dense: self.dense.slice_rows(range.clone()),
            sparse: self.sparse.iter().map(|s| s.slice(range.clone())).collect(),
            labels: self.labels[range].to_vec(),
        }
    }

    /// Reorders samples so that new sample `i` is old sample `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Batch {
        let rows: Vec<&[f64]> = perm.iter().map(|&i| self.dense.row(i)).collect();
        Batch {
            dense: Matrix::from_rows(&rows).expect("equal rows"),
            sparse: self
                .sparse
                .iter()
                .map(|s| {
                    let l = s.lookups();
                    let reordered: Vec<&Vec<usize>> = perm.iter().map(|&i| &l[i]).collect();
                    SparseBatch::from_lookups(&reordered)
                })
                .collect(),
            labels: perm.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DlrmModel {
    pub config: DlrmConfig,
    pub bottom: Mlp,
    pub top: Mlp,
    pub tables: Vec<EmbeddingTable>,
}

/// Intermediate values of [`DlrmModel::forward`].
#[derive(Clone, Debug)]
pub struct DlrmCache {
    pub bottom: MlpCache,
    pub dense_out: Matrix,
    pub embedded: Vec<Matrix>,
    pub top: MlpCache,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DlrmGradients {
    pub bottom: MlpGrads,
    pub top: MlpGrads,
    pub tables: Vec<SparseGrad>,
}

pub(crate) const BOTTOM_STREAM: u64 = 1;
pub(crate) const TOP_STREAM: u64 = 2;
pub(crate) const TABLE_STREAM_BASE: u64 = 1 << 16;

impl DlrmModel {
    /// Randomly initialized model. MLP weights come from
    /// `N(0, 2/(n_in + n_out))` with zero biases; embedding rows from
    /// `U(−1/√d, 1/√d)`. Each part draws from its own substream of
    /// `config.seed`.
    pub fn new(config: DlrmConfig) -> Result<Self> {
        config.validate()?;
        let root = RngStream::new(config.seed);
        let bottom = Mlp::random(
            &config.bottom_mlp,
            Activation::Relu,
            Activation::Relu,
            &mut root.fork(BOTTOM_STREAM),
        );
        let top = Mlp::random(
            &config.top_dims(),
            Activation::Relu,
            Activation::Identity,
            &mut root.fork(TOP_STREAM),
        );
        let tables = config
            .embedding_sizes
            .iter()
            .enumerate()
            .map(|(t, &m)| {
                EmbeddingTable::random(
                    t,
                    m,
                    config.sparse_dim,
                    &mut root.fork(TABLE_STREAM_BASE + t as u64),
                )
            })
            .collect();
        Ok(Self {
            config,
            bottom,
            top,
            tables,
        })
    }

    /// Every parameter zero.
    pub fn zeros(config: DlrmConfig) -> Result<Self> {
        config.validate()?;
        let bottom = Mlp::zeros(&config.bottom_mlp, Activation::Relu, Activation::Relu);
        let top = Mlp::zeros(&config.top_dims(), Activation::Relu, Activation::Identity);
        let tables = config
            .embedding_sizes
            .iter()
            .enumerate()
            .map(|(t, &m)| EmbeddingTable::zeros(t, m, config.sparse_dim))
            .collect();
        Ok(Self {
            config,
            bottom,
            top,
            tables,
        })
    }

    pub fn param_count(&self) -> usize {
        self.bottom.num_params()
            + self.top.num_params()
            + self
                .tables
                .iter()
                .map(|t| t.num_rows() * t.dim())
                .sum::<usize>()
    }

    pub(crate) fn check_inputs(&self, dense: &Matrix, sparse: &[SparseBatch]) -> Result<()> {
        if sparse.len() != self.tables.len() {
            return Err(Error::LengthMismatch {
                op: "sparse batches per table",
                left: sparse.len(),
                right: self.tables.len(),
            });
        }
        for (t, s) in sparse.iter().enumerate() {
            if s.num_segments() != dense.rows() {
                return Err(Error::InvalidBatch(format!(
                    "table {t} has {} lookups for a batch of {}",
                    s.num_segments(),
                    dense.rows()
                )));
            }
        }
        Ok(())
    }

    /// Click probabilities for every sample, plus the values needed to
    /// differentiate them.
    pub fn forward(&self, dense: &Matrix, sparse: &[SparseBatch]) -> Result<(Vec<f64>, DlrmCache)> {
        self.check_inputs(dense, sparse)?;
        let (dense_out, bottom) = self
            .bottom
            .forward(dense)
            .map_err(|e| e.at_stage("bottom_mlp"))?;
        let embedded = self
            .tables
            .iter()
            .zip(sparse)
            .map(|(t, s)| t.lookup(s))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_stage("embedding_lookup"))?;
        let z = interact(&dense_out, &embedded).map_err(|e| e.at_stage("interaction"))?;
        let (logits, top) = self.top.forward(&z).map_err(|e| e.at_stage("top_mlp"))?;
        let logits = logits.into_vec();
        let probs = logits.iter().map(|&l| sigmoid(l)).collect();
        Ok((
            probs,
            DlrmCache {
                bottom,
                dense_out,
                embedded,
                top,
                logits,
            },
        ))
    }

    pub fn predict(&self, dense: &Matrix, sparse: &[SparseBatch]) -> Result<Vec<f64>> {
        Ok(self.forward(dense, sparse)?.0)
    }

    /// Gradients of a loss whose derivative with respect to the pre-sigmoid
    /// logits is `grad_logits`.
    pub fn backward(
        &self,
        cache: &DlrmCache,
        sparse: &[SparseBatch],
        grad_logits: &[f64],
    ) -> Result<DlrmGradients> {
        let mut top = MlpGrads::zeros_like(&self.top);
        let mut bottom = MlpGrads::zeros_like(&self.bottom);
        let grad_emb = self.backward_dense(cache, grad_logits, &mut top, &mut bottom)?;
        let tables = self
            .tables
            .iter()
            .zip(sparse)
            .zip(&grad_emb)
            .map(|((t, s), g)| lookup_backward(t, s, g))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_stage("embedding_backward"))?;
        Ok(DlrmGradients {
            bottom,
            top,
            tables,
        })
    }

    /// The MLP and interaction part of the backward pass. MLP gradients are
    /// added onto `top`/`bottom`; pooled-embedding gradients are returned so
    /// the caller can route them to the owning tables.
    fn backward_dense(
        &self,
        cache: &DlrmCache,
        grad_logits: &[f64],
        top: &mut MlpGrads,
        bottom: &mut MlpGrads,
    ) -> Result<Vec<Matrix>> {
        let g = Matrix::column_vector(grad_logits);
        let grad_z = self
            .top
            .backward_accumulate(&cache.top, &g, top, true)
            .map_err(|e| e.at_stage("top_mlp"))?
            .expect("input gradient requested");
        let (grad_dense, grad_emb) = interact_backward(&cache.dense_out, &cache.embedded, &grad_z)
            .map_err(|e| e.at_stage("interaction"))?;
        self.bottom
            .backward_accumulate(&cache.bottom, &grad_dense, bottom, false)
            .map_err(|e| e.at_stage("bottom_mlp"))?;
        Ok(grad_emb)
    }

    /// Every parameter in a fixed order: bottom MLP, top MLP, tables.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.bottom.flat_values();
        out.extend(self.top.flat_values());
        for t in &self.tables {
            out.extend_from_slice(t.weights().as_slice());
        }
        out
    }
}

/// Per-sample binary cross-entropy term.
#[inline]
pub fn bce_term(prob: f64, label: f64) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(label * p.ln() + (1.0 - label) * (-p).ln_1p())
}

/// Mean binary cross-entropy and its gradient with respect to the
/// pre-sigmoid logits, `(p − y) / batch`.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            op: "bce_loss",
            left: probs.len(),
            right: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(Error::InvalidArgument("bce_loss on an empty batch".into()));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        total += bce_term(p, y);
    }
    let grad = probs.iter().zip(labels).map(|(p, y)| (p - y) / n).collect();
    Ok((total / n, grad))
}

/// Number of samples where `(p > 0.5) == label`.
pub fn correct_predictions(probs: &[f64], labels: &[f64]) -> usize {
    probs
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p > 0.5) == (y > 0.5))
        .count()
}
