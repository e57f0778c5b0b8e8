//! A dense tanh network with a flat parameter vector and manual backprop.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::flowmatch::{ActionChunk, FieldStep, FieldTarget};

/// Values per action: 3 translation, 4 quaternion, 1 gripper.
pub const ACTION_DIM: usize = 8;

/// Layer sizes `[input, hidden.., output]` and all weights, layer by layer:
/// the row-major `out x in` weight matrix followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    sizes: Vec<usize>,
    values: Vec<f64>,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Input width for a chunk of `horizon` actions and `cond_dim` conditioning values.
pub fn input_dim(horizon: usize, cond_dim: usize) -> usize {
    1 + ACTION_DIM * horizon + cond_dim
}

/// `[input, hidden.., output]` for the denoiser.
pub fn layer_sizes(horizon: usize, cond_dim: usize, hidden: &[usize]) -> Vec<usize> {
    let mut s = vec![input_dim(horizon, cond_dim)];
    s.extend_from_slice(hidden);
    s.push(ACTION_DIM * horizon);
    s
}

impl DenoiserParams {
    pub fn zeros(sizes: Vec<usize>) -> Result<Self, TrainError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(TrainError::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        let n = param_count(&sizes);
        Ok(Self {
            sizes,
            values: vec![0.0; n],
        })
    }

    pub fn from_values(sizes: Vec<usize>, values: Vec<f64>) -> Result<Self, TrainError> {
        let p = Self::zeros(sizes)?;
        if values.len() != p.values.len() {
            return Err(TrainError::ShapeMismatch {
                expected: p.values.len(),
                got: values.len(),
            });
        }
        Ok(Self { values, ..p })
    }

    /// Weights `N(0, 1/fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(sizes: Vec<usize>, rng: &mut R) -> Result<Self, TrainError> {
        let mut p = Self::zeros(sizes)?;
        for l in 0..p.layer_count() {
            let (w, _, fan_in, _) = p.offsets(l);
            let std = (1.0 / fan_in as f64).sqrt();
            let len = p.sizes[l] * p.sizes[l + 1];
            for v in &mut p.values[w..w + len] {
                let z: f64 = rng.sample(StandardNormal);
                *v = std * z;
            }
        }
        Ok(p)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    /// `(weight offset, bias offset, in, out)` of layer `l`.
    pub fn offsets(&self, l: usize) -> (usize, usize, usize, usize) {
        let w = param_count(&self.sizes[..=l]);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        (w, w + i * o, i, o)
    }

    /// Weight matrix and bias vector of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (w, b, i, o) = self.offsets(l);
        (&self.values[w..w + i * o], &self.values[b..b + o])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-layer outputs of one forward pass; `layers[0]` is the input.
#[derive(Debug, Clone)]
pub struct Activations {
    pub layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("at least input and output")
    }
}

pub fn forward_raw(params: &DenoiserParams, input: &[f64]) -> Result<Activations, TrainError> {
    if input.len() != params.input_dim() {
        return Err(TrainError::ShapeMismatch {
            expected: params.input_dim(),
            got: input.len(),
        });
    }
    let last = params.layer_count() - 1;
    let mut layers = Vec::with_capacity(params.layer_count() + 1);
    layers.push(input.to_vec());
    for l in 0..params.layer_count() {
        let (w, b) = params.layer(l);
        let x = &layers[l];
        let n_in = x.len();
        let mut y: Vec<f64> = b
            .iter()
            .enumerate()
            .map(|(o, bo)| bo + dot(&w[o * n_in..(o + 1) * n_in], x))
            .collect();
        if l < last {
            y.iter_mut().for_each(|v| *v = v.tanh());
        }
        layers.push(y);
    }
    Ok(Activations { layers })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Accumulates `d loss / d params` into `grad` given `d loss / d output`.
pub fn backward(params: &DenoiserParams, acts: &Activations, d_out: &[f64], grad: &mut [f64]) {
    let mut delta = d_out.to_vec();
    for l in (0..params.layer_count()).rev() {
        let (w_off, b_off, n_in, n_out) = params.offsets(l);
        let x = &acts.layers[l];
        for o in 0..n_out {
            let d = delta[o];
            grad[b_off + o] += d;
            if d != 0.0 {
                let row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                row.iter_mut().zip(x).for_each(|(g, xi)| *g += d * xi);
            }
        }
        if l == 0 {
            break;
        }
        let w = &params.values[w_off..w_off + n_in * n_out];
        let mut prev = vec![0.0; n_in];
        for o in 0..n_out {
            let d = delta[o];
            if d != 0.0 {
                prev.iter_mut()
                    .zip(&w[o * n_in..(o + 1) * n_in])
                    .for_each(|(p, wi)| *p += d * wi);
            }
        }
        // Hidden layers are tanh: d tanh = 1 − y².
        for (p, y) in prev.iter_mut().zip(x) {
            *p *= 1.0 - y * y;
        }
        delta = prev;
    }
}

/// Flattened chunk features: per step `x, y, z, qw, qx, qy, qz, g`.
pub fn chunk_features(chunk: &ActionChunk) -> Vec<f64> {
    chunk
        .iter()
        .flat_map(|a| {
            let q = a.q.to_array();
            [a.x[0], a.x[1], a.x[2], q[0], q[1], q[2], q[3], a.g]
        })
        .collect()
}

pub fn encode_input(tau: f64, features: &[f64], cond: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(1 + features.len() + cond.len());
    v.push(tau);
    v.extend_from_slice(features);
    v.extend_from_slice(cond);
    v
}

pub fn split_output(out: &[f64]) -> FieldTarget {
    out.chunks_exact(ACTION_DIM)
        .map(|c| FieldStep {
            u_x: [c[0], c[1], c[2]],
            u_q: [c[3], c[4], c[5], c[6]],
            u_g: c[7],
        })
        .collect()
}

/// Predicted field for a noisy chunk at flow time `tau`.
pub fn forward(params: &DenoiserParams, tau: f64, noisy: &ActionChunk, cond: &[f64]) -> Result<FieldTarget, TrainError> {
    let expected = params.output_dim() / ACTION_DIM;
    if noisy.horizon() != expected {
        return Err(TrainError::ShapeMismatch {
            expected,
            got: noisy.horizon(),
        });
    }
    let acts = forward_raw(params, &encode_input(tau, &chunk_features(noisy), cond))?;
    Ok(split_output(acts.output()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::sample_noise;
    use crate::seeding;

    #[test]
    fn zero_weights_give_zero_field() {
        let p = DenoiserParams::zeros(layer_sizes(5, 3, &[16, 16])).unwrap();
        let noisy = sample_noise(&mut seeding::rng(0), 5).unwrap();
        let f = forward(&p, 0.3, &noisy, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(f.len(), 5);
        assert_eq!(p.output_dim(), 40);
        assert!(f.iter().all(|s| s.u_x == [0.0; 3] && s.u_q == [0.0; 4] && s.u_g == 0.0));
    }

    #[test]
    fn forward_is_deterministic_and_checks_shapes() {
        let p = DenoiserParams::init(layer_sizes(5, 2, &[8]), &mut seeding::rng(1)).unwrap();
        let noisy = sample_noise(&mut seeding::rng(2), 5).unwrap();
        let a = forward(&p, 0.5, &noisy, &[0.0, 1.0]).unwrap();
        let b = forward(&p, 0.5, &noisy, &[0.0, 1.0]).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            forward(&p, 0.5, &noisy, &[1.0]),
            Err(TrainError::ShapeMismatch { .. })
        ));
        let short = sample_noise(&mut seeding::rng(2), 4).unwrap();
        assert!(forward(&p, 0.5, &short, &[0.0, 1.0]).is_err());
    }
}
