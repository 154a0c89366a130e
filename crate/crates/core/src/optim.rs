//! SGD and Adagrad. MLP parameters are updated densely; embedding tables only
//! on the rows that appear in their sparse gradient.

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, SparseGrad};
use crate::error::{Error, Result};
use crate::model::{DlrmGradients, DlrmModel, Mlp, MlpGrads};

pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
pub const DEFAULT_ADAGRAD_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adagrad { lr: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adagrad(lr: f64) -> Self {
        Optimizer::Adagrad {
            lr,
            eps: DEFAULT_ADAGRAD_EPS,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr } | Optimizer::Adagrad { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be a nonnegative number, got {lr}"
            )));
        }
        if let Optimizer::Adagrad { eps, .. } = *self {
            if eps.is_nan() || eps < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "adagrad eps must be nonnegative, got {eps}"
                )));
            }
        }
        Ok(())
    }

    fn needs_state(&self) -> bool {
        matches!(self, Optimizer::Adagrad { .. })
    }
}

/// Running sums of squared gradients, one per parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdagradState {
    accum: Vec<f64>,
}

impl AdagradState {
    pub fn new(len: usize) -> Self {
        Self {
            accum: vec![0.0; len],
        }
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accum
    }

    pub fn len(&self) -> usize {
        self.accum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accum.is_empty()
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch {
            op,
            left: a,
            right: b,
        });
    }
    Ok(())
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_len("sgd_step", params.len(), grads.len())?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

pub fn sgd_step_sparse(table: &mut EmbeddingTable, grad: &SparseGrad, lr: f64) -> Result<()> {
    check_sparse(table, grad)?;
    let w = table.weights_mut();
    for (r, g) in grad.iter() {
        sgd_step(w.row_mut(r), g, lr)?;
    }
    Ok(())
}

#[inline]
fn adagrad_update(params: &mut [f64], grads: &[f64], accum: &mut [f64], lr: f64, eps: f64) {
    for ((p, &g), acc) in params.iter_mut().zip(grads).zip(accum) {
        if g == 0.0 {
            continue;
        }
        *acc += g * g;
        *p -= lr * g / (acc.sqrt() + eps);
    }
}

/// `G ← G + g²; θ ← θ − lr·g / (√G + eps)`, elementwise. Entries with a zero
/// gradient are left alone.
pub fn adagrad_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdagradState,
    lr: f64,
    eps: f64,
) -> Result<()> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::InvalidArgument(format!("adagrad eps must be nonnegative, got {eps}")));
    }
    check_len("adagrad_step", params.len(), grads.len())?;
    check_len("adagrad_step state", params.len(), state.accum.len())?;
    adagrad_update(params, grads, &mut state.accum, lr, eps);
    Ok(())
}

/// Adagrad on the rows named by `grad`; both the weights and the
/// accumulators of other rows stay untouched.
pub fn adagrad_step_sparse(
    table: &mut EmbeddingTable,
    grad: &SparseGrad,
    state: &mut AdagradState,
    lr: f64,
    eps: f64,
) -> Result<()> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::InvalidArgument(format!("adagrad eps must be nonnegative, got {eps}")));
    }
    check_sparse(table, grad)?;
    let d = table.dim();
    check_len("adagrad_step_sparse state", table.num_rows() * d, state.accum.len())?;
    let w = table.weights_mut();
    for (r, g) in grad.iter() {
        adagrad_update(w.row_mut(r), g, &mut state.accum[r * d..(r + 1) * d], lr, eps);
    }
    Ok(())
}

fn check_sparse(table: &EmbeddingTable, grad: &SparseGrad) -> Result<()> {
    check_len("sparse grad dim", grad.dim(), table.dim())?;
    if let Some(&r) = grad.rows().last() {
        if r >= table.num_rows() {
            return Err(Error::IndexOutOfRange {
                table: table.id(),
                position: grad.len() - 1,
                index: r,
                rows: table.num_rows(),
            });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerState {
    pub weight: AdagradState,
    pub bias: AdagradState,
}

/// Optimizer state for one MLP. Empty under SGD.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpState {
    pub layers: Vec<LayerState>,
}

impl MlpState {
    pub fn new(optimizer: &Optimizer, mlp: &Mlp) -> Self {
        let stateful = optimizer.needs_state();
        Self {
            layers: mlp
                .layers()
                .iter()
                .map(|l| LayerState {
                    weight: AdagradState::new(if stateful { l.weight.as_slice().len() } else { 0 }),
                    bias: AdagradState::new(if stateful { l.bias.len() } else { 0 }),
                })
                .collect(),
        }
    }
}

pub fn table_state(optimizer: &Optimizer, table: &EmbeddingTable) -> AdagradState {
    AdagradState::new(if optimizer.needs_state() {
        table.num_rows() * table.dim()
    } else {
        0
    })
}

fn dense_update(
    optimizer: &Optimizer,
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdagradState,
) -> Result<()> {
    match *optimizer {
        Optimizer::Sgd { lr } => sgd_step(params, grads, lr),
        Optimizer::Adagrad { lr, eps } => adagrad_step(params, grads, state, lr, eps),
    }
}

pub fn update_mlp(
    optimizer: &Optimizer,
    mlp: &mut Mlp,
    state: &mut MlpState,
    grads: &MlpGrads,
) -> Result<()> {
    check_len("mlp grads", grads.layers.len(), mlp.layers().len())?;
    check_len("mlp state", state.layers.len(), mlp.layers().len())?;
    for ((layer, st), g) in mlp.layers_mut().iter_mut().zip(&mut state.layers).zip(&grads.layers) {
        dense_update(optimizer, layer.weight.as_mut_slice(), g.weight.as_slice(), &mut st.weight)?;
        dense_update(optimizer, &mut layer.bias, &g.bias, &mut st.bias)?;
    }
    Ok(())
}

pub fn update_table(
    optimizer: &Optimizer,
    table: &mut EmbeddingTable,
    state: &mut AdagradState,
    grad: &SparseGrad,
) -> Result<()> {
    match *optimizer {
        Optimizer::Sgd { lr } => sgd_step_sparse(table, grad, lr),
        Optimizer::Adagrad { lr, eps } => adagrad_step_sparse(table, grad, state, lr, eps),
    }
}

/// Optimizer plus state for a whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptimizer {
    pub optimizer: Optimizer,
    pub bottom: MlpState,
    pub top: MlpState,
    pub tables: Vec<AdagradState>,
}

impl ModelOptimizer {
    pub fn new(optimizer: Optimizer, model: &DlrmModel) -> Result<Self> {
        optimizer.validate()?;
        Ok(Self {
            optimizer,
            bottom: MlpState::new(&optimizer, &model.bottom),
            top: MlpState::new(&optimizer, &model.top),
            tables: model.tables.iter().map(|t| table_state(&optimizer, t)).collect(),
        })
    }

    pub fn step(&mut self, model: &mut DlrmModel, grads: &DlrmGradients) -> Result<()> {
        update_mlp(&self.optimizer, &mut model.bottom, &mut self.bottom, &grads.bottom)?;
        update_mlp(&self.optimizer, &mut model.top, &mut self.top, &grads.top)?;
        check_len("table grads", grads.tables.len(), model.tables.len())?;
        for ((t, st), g) in model.tables.iter_mut().zip(&mut self.tables).zip(&grads.tables) {
            update_table(&self.optimizer, t, st, g)?;
        }
        Ok(())
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn accumulators_never_decrease(steps in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..10)) {
            let mut p = vec![0.0; 4];
            let mut s = AdagradState::new(4);
            let mut prev = s.accumulators().to_vec();
            for g in &steps {
                adagrad_step(&mut p, g, &mut s, 0.1, 1e-10).unwrap();
                for (a, b) in s.accumulators().iter().zip(&prev) {
                    prop_assert!(a >= b);
                }
                prev = s.accumulators().to_vec();
            }
        }
    }
}
