//! Tanh MLP velocity network with hand-written backprop.
//!
//! Weights live in one flat array, layer by layer: the `out x in` matrix in
//! row-major order (row = output unit), followed by that layer's `out` biases.
//! Hidden layers use `tanh`; the output layer is linear.

use rand::Rng;

use crate::error::{check_dims, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<f64>,
}

/// Number of weights (including biases) for the given layer dimensions.
pub fn weight_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "MLP needs at least an input and an output layer, got dims {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("MLP layer dims must be positive, got {dims:?}")));
    }
    Ok(())
}

impl Mlp {
    pub fn new(dims: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        validate_dims(&dims)?;
        let expected = weight_count(&dims);
        if weights.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: weights.len() });
        }
        Ok(Self { dims, weights })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialisation for weights and biases.
    pub fn init<R: Rng + ?Sized>(dims: Vec<usize>, rng: &mut R) -> Result<Self> {
        validate_dims(&dims)?;
        let mut weights = Vec::with_capacity(weight_count(&dims));
        for w in dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                weights.push(rng.random_range(-bound..=bound));
            }
        }
        Ok(Self { dims, weights })
    }

    /// Velocity network for `data_dim`-dimensional data: input `data_dim + 1`
    /// (the time feature is appended), output `data_dim`.
    pub fn velocity_dims(data_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(data_dim + 1);
        dims.extend_from_slice(hidden);
        dims.push(data_dim);
        dims
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        check_dims(self.weights.len(), weights.len())?;
        self.weights.copy_from_slice(weights);
        Ok(())
    }

    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_weights(weights)?;
        Ok(out)
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated non-empty")
    }

    pub fn num_weights(&self) -> usize {
        self.weights.len()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut acts = self.forward_trace(input);
        acts.pop().expect("at least one layer")
    }

    /// Activations of every layer; `[0]` is the input, the last entry the output.
    fn forward_trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        debug_assert_eq!(input.len(), self.input_dim());
        let n_layers = self.dims.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        let mut off = 0;
        for (l, w) in self.dims.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let mat = &self.weights[off..off + n_in * n_out];
            let bias = &self.weights[off + n_in * n_out..off + (n_in + 1) * n_out];
            let prev = &acts[l];
            let mut out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &mat[o * n_in..(o + 1) * n_in];
                    row.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>() + bias[o]
                })
                .collect();
            if l + 1 < n_layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
            off += (n_in + 1) * n_out;
        }
        acts
    }

    /// Vector-Jacobian product: accumulates `upstream^T * d(output)/d(weights)`
    /// into `grad`, and returns the output of the forward pass.
    pub fn vjp(&self, input: &[f64], upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(upstream.len(), self.output_dim());
        debug_assert_eq!(grad.len(), self.weights.len());
        let acts = self.forward_trace(input);
        let n_layers = self.dims.len() - 1;

        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in self.dims.windows(2) {
            offsets.push(off);
            off += (w[0] + 1) * w[1];
        }

        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (gi, &a) in g.iter_mut().zip(prev) {
                    *gi += d * a;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let mat = &self.weights[off..off + n_in * n_out];
                let mut next = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (ni, &wi) in next.iter_mut().zip(&mat[o * n_in..(o + 1) * n_in]) {
                        *ni += wi * d;
                    }
                }
                // tanh' = 1 - tanh^2, evaluated on this layer's input activations
                for (ni, &a) in next.iter_mut().zip(prev) {
                    *ni *= 1.0 - a * a;
                }
                delta = next;
            }
        }
        acts.into_iter().last().expect("output layer")
    }

    /// Velocity at `(x, t)`: the network applied to `[x, t]`.
    pub fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.forward(&time_input(x, t))
    }

    /// [`Mlp::vjp`] for the velocity input layout.
    pub fn velocity_vjp(&self, x: &[f64], t: f64, upstream: &[f64], grad: &mut [f64]) -> Vec<f64> {
        self.vjp(&time_input(x, t), upstream, grad)
    }
}

fn time_input(x: &[f64], t: f64) -> Vec<f64> {
    let mut input = Vec::with_capacity(x.len() + 1);
    input.extend_from_slice(x);
    input.push(t);
    input
}
