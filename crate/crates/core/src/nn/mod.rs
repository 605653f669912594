//! Dense ReLU classifier with exact reverse-mode gradients.
//!
//! Weights are stored row-major as `outputs x inputs`. Hidden layers use ReLU,
//! the last layer emits raw logits.

mod adamw;
mod loss;

pub use adamw::{AdamW, AdamWConfig};
pub use loss::{calibration_loss_grad_to_logits, nll_loss_and_grad, softmax_rows};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    /// `out[b, o] = sum_i x[b, i] W[o, i] + bias[o]`.
    fn affine(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(batch * self.outputs);
        for row in x.chunks_exact(self.inputs).take(batch) {
            for (w, &b) in self.weights.chunks_exact(self.inputs).zip(&self.biases) {
                out.push(row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNetwork {
    layers: Vec<DenseLayer>,
}

/// Inputs and pre-activations recorded by [`DenseNetwork::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub batch: usize,
    /// Input to each layer (`inputs[0]` is the feature batch).
    pub inputs: Vec<Vec<f64>>,
    /// Affine output of each layer, before ReLU.
    pub pre_activations: Vec<Vec<f64>>,
}

/// Parameter-shaped buffer: gradients, optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBuffer {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamBuffer {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: net
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamBuffer, scale: f64) {
        for (a, b) in self.slices_mut().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().flatten().copied().collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().flatten().all(|&v| v == 0.0)
    }
}

impl DenseNetwork {
    /// Kaiming-uniform initialization: weights `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`,
    /// biases `U(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "layer sizes {layer_sizes:?} need at least input and output widths, all positive"
            )));
        }
        let mut rng = SplitMix64::new(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let bias_bound = 1.0 / (fan_in as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
                    .collect();
                let biases = (0..fan_out)
                    .map(|_| (2.0 * rng.uniform() - 1.0) * bias_bound)
                    .collect();
                DenseLayer {
                    inputs: fan_in,
                    outputs: fan_out,
                    weights,
                    biases,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network has no layers"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::invalid(format!("layer {i} has inconsistent shapes")));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs != w[1].inputs {
                return Err(Error::invalid(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].outputs,
                    i + 1,
                    w[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    /// A network with every parameter zero.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::from_layers(
            layer_sizes
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
        )
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn num_inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn params(&self) -> ParamBuffer {
        ParamBuffer {
            weights: self.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: self.layers.iter().map(|l| l.biases.clone()).collect(),
        }
    }

    pub fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
    }

    fn check_batch(&self, x: &[f64]) -> Result<usize> {
        let f = self.num_inputs();
        if x.is_empty() || !x.len().is_multiple_of(f) {
            return Err(Error::invalid(format!(
                "feature buffer of length {} is not a batch of width {f}",
                x.len()
            )));
        }
        Ok(x.len() / f)
    }

    /// Forward pass over a row-major feature batch; returns logits and the
    /// trace needed by [`backward`](Self::backward).
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        let batch = self.check_batch(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&current, batch);
            let next = if i == last {
                z.clone()
            } else {
                z.iter().map(|&v| v.max(0.0)).collect()
            };
            inputs.push(std::mem::replace(&mut current, next));
            pre_activations.push(z);
        }
        Ok((
            current,
            ForwardTrace {
                batch,
                inputs,
                pre_activations,
            },
        ))
    }

    /// Logits only.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let batch = self.check_batch(x)?;
        let last = self.layers.len() - 1;
        let mut current = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&current, batch);
            if i != last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            current = z;
        }
        Ok(current)
    }

    /// Reverse-mode gradients of a loss given `d loss / d logits`.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &[f64]) -> Result<ParamBuffer> {
        let batch = trace.batch;
        if grad_logits.len() != batch * self.num_classes()
            || trace.inputs.len() != self.layers.len()
        {
            return Err(Error::invalid("backward called with a mismatched trace"));
        }
        let mut grads = ParamBuffer::zeros_like(self);
        let mut upstream = grad_logits.to_vec();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            if li != last {
                for (g, &z) in upstream.iter_mut().zip(&trace.pre_activations[li]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = &trace.inputs[li];
            let (n_in, n_out) = (layer.inputs, layer.outputs);
            let gw = &mut grads.weights[li];
            let gb = &mut grads.biases[li];
            for b in 0..batch {
                let x = &input[b * n_in..(b + 1) * n_in];
                for o in 0..n_out {
                    let d = upstream[b * n_out + o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (w, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                        *w += d * xi;
                    }
                }
            }
            if li > 0 {
                let mut down = vec![0.0; batch * n_in];
                for b in 0..batch {
                    let dx = &mut down[b * n_in..(b + 1) * n_in];
                    for o in 0..n_out {
                        let d = upstream[b * n_out + o];
                        if d == 0.0 {
                            continue;
                        }
                        for (g, &w) in dx.iter_mut().zip(&layer.weights[o * n_in..(o + 1) * n_in]) {
                            *g += d * w;
                        }
                    }
                }
                upstream = down;
            }
        }
        Ok(grads)
    }
}
