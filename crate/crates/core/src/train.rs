//! Single-device training step and evaluation.

use crate::dense::{sigmoid, Matrix};
use crate::embedding::{lookup_backward, SparseGrad};
use crate::error::{Error, Result};
use crate::model::{
    bce_term, correct_predictions, interact, interact_backward, Batch, DlrmGradients, DlrmModel, MlpCache, MlpGrads,
};
use crate::optim::ModelOptimizer;
use crate::profile::{Op, Profiler};

/// Loss and accuracy counts of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Mean binary cross-entropy over the batch.
    pub loss: f64,
    pub correct: usize,
    pub samples: usize,
}

impl StepStats {
    pub fn accuracy(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.correct as f64 / self.samples as f64
        }
    }
}

pub(crate) fn check_batch(model: &DlrmModel, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty mini-batch".into()));
    }
    if batch.labels.len() != batch.len() {
        return Err(Error::LengthMismatch {
            op: "labels",
            left: batch.labels.len(),
            right: batch.len(),
        });
    }
    model.check_inputs(&batch.dense, &batch.sparse)
}

/// Forward, backward and parameter update on one mini-batch.
pub fn train_step(
    model: &mut DlrmModel,
    optimizer: &mut ModelOptimizer,
    batch: &Batch,
    prof: &mut Profiler,
) -> Result<StepStats> {
    let (stats, grads) = compute_gradients(model, batch, prof)?;
    prof.time(Op::Optimizer, || optimizer.step(model, &grads))?;
    Ok(stats)
}

struct Forward {
    embedded: Vec<Matrix>,
    dense_out: Matrix,
    bottom_cache: MlpCache,
    top_cache: MlpCache,
    probs: Vec<f64>,
}

fn forward_profiled(model: &DlrmModel, batch: &Batch, prof: &mut Profiler) -> Result<Forward> {
    check_batch(model, batch)?;
    let embedded = prof
        .time(Op::EmbeddingLookup, || {
            model
                .tables
                .iter()
                .zip(&batch.sparse)
                .map(|(t, s)| t.lookup(s))
                .collect::<Result<Vec<_>>>()
        })
        .map_err(|e| e.at_stage("embedding_lookup"))?;
    let (dense_out, bottom_cache) = prof
        .time(Op::BottomMlp, || model.bottom.forward(&batch.dense))
        .map_err(|e| e.at_stage("bottom_mlp"))?;
    let z = prof
        .time(Op::Interaction, || interact(&dense_out, &embedded))
        .map_err(|e| e.at_stage("interaction"))?;
    let (logits, top_cache) = prof
        .time(Op::TopMlp, || model.top.forward(&z))
        .map_err(|e| e.at_stage("top_mlp"))?;
    let probs = prof.time(Op::Loss, || logits.as_slice().iter().map(|&l| sigmoid(l)).collect());
    Ok(Forward {
        embedded,
        dense_out,
        bottom_cache,
        top_cache,
        probs,
    })
}

fn batch_stats(probs: &[f64], labels: &[f64]) -> StepStats {
    let mut total = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        total += bce_term(p, y);
    }
    StepStats {
        loss: total / labels.len() as f64,
        correct: correct_predictions(probs, labels),
        samples: labels.len(),
    }
}

/// Loss statistics and full gradients for one mini-batch, no update.
pub fn compute_gradients(
    model: &DlrmModel,
    batch: &Batch,
    prof: &mut Profiler,
) -> Result<(StepStats, DlrmGradients)> {
    let n = batch.len();
    let Forward {
        embedded,
        dense_out,
        bottom_cache,
        top_cache,
        probs,
    } = forward_profiled(model, batch, prof)?;

    let (stats, grad_logits) = prof.time(Op::Loss, || {
        let grad: Vec<f64> = probs
            .iter()
            .zip(&batch.labels)
            .map(|(p, y)| (p - y) / n as f64)
            .collect();
        (batch_stats(&probs, &batch.labels), grad)
    });

    let mut top = MlpGrads::zeros_like(&model.top);
    let grad_z = prof
        .time(Op::TopMlp, || {
            model
                .top
                .backward_accumulate(&top_cache, &Matrix::column_vector(&grad_logits), &mut top, true)
        })
        .map_err(|e| e.at_stage("top_mlp"))?
        .expect("input gradient requested");
    let (grad_dense, grad_emb) = prof
        .time(Op::Interaction, || interact_backward(&dense_out, &embedded, &grad_z))
        .map_err(|e| e.at_stage("interaction"))?;
    let mut bottom = MlpGrads::zeros_like(&model.bottom);
    prof.time(Op::BottomMlp, || {
        model
            .bottom
            .backward_accumulate(&bottom_cache, &grad_dense, &mut bottom, false)
    })
    .map_err(|e| e.at_stage("bottom_mlp"))?;
    let tables: Vec<SparseGrad> = prof
        .time(Op::EmbeddingLookup, || {
            model
                .tables
                .iter()
                .zip(&batch.sparse)
                .zip(&grad_emb)
                .map(|((t, s), g)| lookup_backward(t, s, g))
                .collect::<Result<Vec<_>>>()
        })
        .map_err(|e| e.at_stage("embedding_backward"))?;

    Ok((
        stats,
        DlrmGradients {
            bottom,
            top,
            tables,
        },
    ))
}

/// Loss and accuracy without touching parameters.
pub fn evaluate(model: &DlrmModel, batch: &Batch) -> Result<StepStats> {
    evaluate_profiled(model, batch, &mut Profiler::disabled())
}

pub fn evaluate_profiled(model: &DlrmModel, batch: &Batch, prof: &mut Profiler) -> Result<StepStats> {
    let f = forward_profiled(model, batch, prof)?;
    Ok(prof.time(Op::Loss, || batch_stats(&f.probs, &batch.labels)))
}
