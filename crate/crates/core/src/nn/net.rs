//! Dense feed-forward networks: tanh hidden layers, linear output head.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tape::{Tape, Var};

/// Small dense network. Weights are stored row-major per layer:
/// `weights[l][o * in_dim + i]` connects input `i` to output `o`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DenseNet {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl DenseNet {
    /// Xavier-uniform initialization from the given seed.
    pub fn xavier(layer_dims: &[usize], seed: u64) -> Self {
        assert!(layer_dims.len() >= 2, "need at least input and output dims");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        DenseNet {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Plain forward pass for inference.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let n_layers = self.weights.len();
        let mut act = x.to_vec();
        for l in 0..n_layers {
            let (in_dim, out_dim) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let mut next = Vec::with_capacity(out_dim);
            for o in 0..out_dim {
                let row = &self.weights[l][o * in_dim..(o + 1) * in_dim];
                let mut z = self.biases[l][o];
                for (w, a) in row.iter().zip(&act) {
                    z += w * a;
                }
                next.push(if l + 1 < n_layers { z.tanh() } else { z });
            }
            act = next;
        }
        Ok(act)
    }

    /// Flatten parameters in a fixed order (weights then biases, per layer).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut k = 0;
        for l in 0..self.weights.len() {
            let wl = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[k..k + wl]);
            k += wl;
            let bl = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[k..k + bl]);
            k += bl;
        }
        debug_assert_eq!(k, flat.len());
    }

    /// Register every parameter as a tracked tape input, in `params` order.
    pub fn register(&self, tape: &mut Tape) -> NetVars {
        let vars: Vec<Var> = self.params().iter().map(|&p| tape.input(p)).collect();
        NetVars {
            layer_dims: self.layer_dims.clone(),
            vars,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}

/// Tape handles for a registered network's parameters.
pub struct NetVars {
    layer_dims: Vec<usize>,
    vars: Vec<Var>,
}

impl NetVars {
    /// Forward pass on the tape; `x` are already tape vars (constants).
    pub fn forward(&self, tape: &mut Tape, x: &[Var]) -> Vec<Var> {
        let n_layers = self.layer_dims.len() - 1;
        let mut act = x.to_vec();
        let mut k = 0;
        for l in 0..n_layers {
            let (in_dim, out_dim) = (self.layer_dims[l], self.layer_dims[l + 1]);
            let w = &self.vars[k..k + in_dim * out_dim];
            k += in_dim * out_dim;
            let b = &self.vars[k..k + out_dim];
            k += out_dim;
            let mut next = Vec::with_capacity(out_dim);
            for o in 0..out_dim {
                let mut z = b[o];
                for (i, &a) in act.iter().enumerate() {
                    let t = tape.mul(w[o * in_dim + i], a);
                    z = tape.add(z, t);
                }
                next.push(if l + 1 < n_layers { tape.tanh(z) } else { z });
            }
            act = next;
        }
        act
    }

    /// Gradient of the last backward pass, flat, in `params` order.
    pub fn grads(&self, tape: &Tape) -> Vec<f64> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Per-coordinate affine input normalization, fit on the training set and
/// stored with each checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; d];
        for r in rows {
            for (s, (v, m)) in std.iter_mut().zip(r.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt().max(1e-8);
        }
        Normalizer { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}
