//! Dense feed-forward network with ReLU hidden layers and a linear output.
//!
//! Parameters live in one flat vector. Layer `l` (input `n_in`, output
//! `n_out`) contributes its weight matrix row-major (`n_out x n_in`, entry
//! `[o, i]` at `o * n_in + i`) followed by its `n_out` biases; layers are
//! stored in order.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::codec::EncodedMlp;
use crate::rng::RngSeed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EncodedMlp", into = "EncodedMlp")]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations cached by a forward pass, consumed by backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l + 1]` is the
    /// post-activation output of layer `l` (raw scores for the last).
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }

    /// Activations entering layer `l` (`layer(0)` is the input).
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.activations[l]
    }
}

impl MlpModel {
    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Shape(format!(
                "layer sizes {layer_sizes:?} need an input, an output and no empty layer"
            )));
        }
        let n = param_count(layer_sizes);
        Ok(MlpModel {
            layer_sizes: layer_sizes.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// He-uniform weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    pub fn init(layer_sizes: &[usize], seed: RngSeed) -> Result<Self> {
        let mut m = MlpModel::zeros(layer_sizes)?;
        let mut rng = seed.rng();
        let mut off = 0;
        for w in m.layer_sizes.clone().windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let bound = (6.0 / n_in as f64).sqrt();
            for p in &mut m.params[off..off + n_in * n_out] {
                *p = rng.random_range(-bound..bound);
            }
            off += n_in * n_out + n_out;
        }
        Ok(m)
    }

    pub fn from_params(layer_sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let m = MlpModel::zeros(layer_sizes)?;
        if params.len() != m.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Shape("parameters must be finite".into()));
        }
        Ok(MlpModel {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offsets `(weights, biases)` of layer `l` in the flat vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.layer_sizes.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        (off, off + n_in * n_out)
    }

    /// Weight matrix of layer `l`, row-major.
    pub fn weights(&self, l: usize) -> &[f64] {
        let (w, b) = self.layer_offsets(l);
        &self.params[w..b]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        let (_, b) = self.layer_offsets(l);
        &self.params[b..b + self.layer_sizes[l + 1]]
    }

    /// `true` for entries that are weights (not biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.params.len());
        for w in self.layer_sizes.windows(2) {
            mask.extend(std::iter::repeat_n(true, w[0] * w[1]));
            mask.extend(std::iter::repeat_n(false, w[1]));
        }
        mask
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        (0..self.num_layers())
            .map(|l| self.weights(l).iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Raw output scores.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.activations.pop().unwrap())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layer_sizes.len());
        activations.push(input.to_vec());
        let last = self.num_layers() - 1;
        for l in 0..self.num_layers() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = self.weights(l);
            let b = self.biases(l);
            let a = &activations[l];
            let mut z = b.to_vec();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>();
            }
            if l != last {
                for v in &mut z {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            debug_assert_eq!(z.len(), n_out);
            activations.push(z);
        }
        Ok(ForwardTrace { activations })
    }

    /// Accumulates `d(upstream . output) / d(params)` into `grads`.
    ///
    /// The ReLU derivative at exactly zero is taken as zero.
    pub fn backward_into(&self, trace: &ForwardTrace, upstream: &[f64], grads: &mut [f64]) -> Result<()> {
        if upstream.len() != self.output_dim() || grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "upstream length {} / gradient length {} do not match the network",
                upstream.len(),
                grads.len()
            )));
        }
        let mut delta = upstream.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let a_in = &trace.activations[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grads[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(a_in) {
                    *g += d * a;
                }
                grads[b_off + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = self.weights(l);
            let mut prev = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            // a_in is the ReLU output of layer l - 1
            for (p, a) in prev.iter_mut().zip(a_in) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok(())
    }

    /// Parameter gradients of `upstream . forward(input)`.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(input)?;
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(&trace, upstream, &mut grads)?;
        Ok(grads)
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Forward pass. See [`MlpModel::forward`].
pub fn mlp_forward(m: &MlpModel, input: &[f64]) -> Result<Vec<f64>> {
    m.forward(input)
}

/// Parameter gradients. See [`MlpModel::backward`].
pub fn mlp_backward(m: &MlpModel, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    m.backward(input, upstream)
}
