use serde::{Deserialize, Serialize};

use crate::dense::{matmul, matmul_tn_accumulate, Activation, Matrix, RngStream};
use crate::error::{Error, Result};

/// One fully connected layer, `y = σ(x Wᵀ + b)` with `W` stored `n_out × n_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::LengthMismatch {
                op: "layer bias",
                left: bias.len(),
                right: weight.rows(),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations saved by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl MlpCache {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }
}

/// Error signals of one backward pass, one `batch × n_out` matrix per layer.
#[derive(Clone, Debug)]
pub struct MlpDeltas {
    deltas: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Every gradient value, layer by layer, weights before biases.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::Config(format!(
                    "layer {} takes {} inputs but layer {} produces {}",
                    i + 1,
                    pair[1].input_dim(),
                    i,
                    pair[0].output_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Layers `dims[0] → dims[1] → … → dims[n]`, all zero.
    pub fn zeros(dims: &[usize], hidden: Activation, last: Activation) -> Self {
        Self::build(dims, hidden, last, Matrix::zeros)
    }

    /// Weights from `N(0, 2/(n_in + n_out))`, zero biases.
    pub fn random(dims: &[usize], hidden: Activation, last: Activation, rng: &mut RngStream) -> Self {
        Self::build(dims, hidden, last, |rows, cols| {
            let std = (2.0 / (rows + cols) as f64).sqrt();
            let mut w = rng.normal(rows, cols);
            for v in w.as_mut_slice() {
                *v *= std;
            }
            w
        })
    }

    fn build(
        dims: &[usize],
        hidden: Activation,
        last: Activation,
        mut weight: impl FnMut(usize, usize) -> Matrix,
    ) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|l| Layer {
                weight: weight(dims[l + 1], dims[l]),
                bias: vec![0.0; dims[l + 1]],
                activation: if l + 1 == n { last } else { hidden },
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(Layer::input_dim)
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(Layer::output_dim)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// All parameter values, layer by layer, weights before biases.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if let Some(n0) = self.input_dim() {
            if x.cols() != n0 {
                return Err(Error::shape("mlp_forward", x.shape(), (n0, self.layers[0].output_dim())));
            }
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let mut z = matmul(&current, &layer.weight.transpose())?;
            for s in 0..z.rows() {
                for (v, b) in z.row_mut(s).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut a = z.clone();
            if layer.activation != Activation::Identity {
                for v in a.as_mut_slice() {
                    *v = layer.activation.apply(*v);
                }
            }
            inputs.push(std::mem::replace(&mut current, a));
            pre_activations.push(z);
        }
        Ok((
            current,
            MlpCache {
                inputs,
                pre_activations,
            },
        ))
    }

    pub fn backward(&self, cache: &MlpCache, grad_y: &Matrix) -> Result<(MlpGrads, Matrix)> {
        let mut grads = MlpGrads::zeros_like(self);
        let grad_x = self.backward_accumulate(cache, grad_y, &mut grads, true)?;
        Ok((grads, grad_x.expect("input gradient requested")))
    }

    /// Adds this batch's parameter gradients onto `grads`, summing over samples
    /// in ascending order after whatever `grads` already holds. Returns the
    /// input gradient when asked for.
    pub fn backward_accumulate(
        &self,
        cache: &MlpCache,
        grad_y: &Matrix,
        grads: &mut MlpGrads,
        want_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        let (deltas, grad_x) = self.backward_deltas(cache, grad_y, want_input_grad)?;
        self.accumulate_grads(cache, &deltas, grads)?;
        Ok(grad_x)
    }

    /// Per-layer error signals `δ_l = ∂L/∂z_l` without touching any
    /// parameter gradient, plus the input gradient when asked for.
    pub fn backward_deltas(
        &self,
        cache: &MlpCache,
        grad_y: &Matrix,
        want_input_grad: bool,
    ) -> Result<(MlpDeltas, Option<Matrix>)> {
        self.check_cache(cache)?;
        let batch = cache.batch_size();
        if self.layers.is_empty() {
            return Ok((MlpDeltas { deltas: Vec::new() }, want_input_grad.then(|| grad_y.clone())));
        }
        let out_dim = self.output_dim().unwrap_or(0);
        if grad_y.shape() != (batch, out_dim) {
            return Err(Error::shape("mlp_backward", grad_y.shape(), (batch, out_dim)));
        }

        let mut deltas = vec![Matrix::zeros(0, 0); self.layers.len()];
        let mut grad = grad_y.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[l];
            if layer.activation != Activation::Identity {
                for (g, &zv) in grad.as_mut_slice().iter_mut().zip(z.as_slice()) {
                    *g *= layer.activation.derivative(zv);
                }
            }
            let next = if l > 0 || want_input_grad {
                Some(matmul(&grad, &layer.weight)?)
            } else {
                None
            };
            deltas[l] = match next {
                Some(n) => std::mem::replace(&mut grad, n),
                None => grad.clone(),
            };
        }
        Ok((MlpDeltas { deltas }, want_input_grad.then_some(grad)))
    }

    /// `grad_W_l += δ_lᵀ x_l` and `grad_b_l += Σ_s δ_l[s]`, samples in
    /// ascending order.
    pub fn accumulate_grads(
        &self,
        cache: &MlpCache,
        deltas: &MlpDeltas,
        grads: &mut MlpGrads,
    ) -> Result<()> {
        if grads.layers.len() != self.layers.len() || deltas.deltas.len() != self.layers.len() {
            return Err(Error::LengthMismatch {
                op: "mlp_backward grads",
                left: grads.layers.len(),
                right: self.layers.len(),
            });
        }
        for (l, delta) in deltas.deltas.iter().enumerate() {
            let lg = &mut grads.layers[l];
            matmul_tn_accumulate(&mut lg.weight, delta, &cache.inputs[l])?;
            for s in 0..delta.rows() {
                for (b, g) in lg.bias.iter_mut().zip(delta.row(s)) {
                    *b += g;
                }
            }
        }
        Ok(())
    }

    fn check_cache(&self, cache: &MlpCache) -> Result<()> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache holds {} layers, network has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if cache.inputs[l].cols() != layer.input_dim()
                || cache.pre_activations[l].cols() != layer.output_dim()
            {
                return Err(Error::StaleCache(format!(
                    "layer {l} is {}→{} but the cache recorded {}→{}",
                    layer.input_dim(),
                    layer.output_dim(),
                    cache.inputs[l].cols(),
                    cache.pre_activations[l].cols()
                )));
            }
        }
        Ok(())
    }
}
