//! Shared test oracles: an independent f64 re-implementation of the MLP
//! forward pass plus central-finite-difference gradient checks. Everything
//! here is deliberately written against the math, not against the crate's
//! own backward code.

#![allow(dead_code)]

use fairdiff_core::nn::{Activation, MlpParams, OutputHead};

/// f64 mirror of an MLP, built by casting the f32 parameters up.
pub struct RefNet {
    pub weights: Vec<Vec<Vec<f64>>>, // [layer][out][in]
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
    pub head: OutputHead,
}

impl RefNet {
    pub fn from_params(p: &MlpParams) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in &p.layers {
            let (rows, cols) = (layer.w.nrows(), layer.w.ncols());
            let mut w = vec![vec![0.0f64; cols]; rows];
            for r in 0..rows {
                for c in 0..cols {
                    w[r][c] = layer.w[[r, c]] as f64;
                }
            }
            weights.push(w);
            biases.push(layer.b.iter().map(|&v| v as f64).collect());
        }
        Self { weights, biases, activation: p.spec.activation, head: p.spec.output_head }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n_layers = self.weights.len();
        let mut h: Vec<f64> = x.to_vec();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z: Vec<f64> = w
                .iter()
                .zip(b)
                .map(|(row, &bias)| row.iter().zip(&h).map(|(&wv, &hv)| wv * hv).sum::<f64>() + bias)
                .collect();
            if i + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = match self.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Tanh => v.tanh(),
                    };
                }
            } else if self.head == OutputHead::LogSoftmax {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                for v in z.iter_mut() {
                    *v -= lse;
                }
            }
            z.truncate(z.len());
            h = z;
        }
        h
    }

    /// Smallest |pre-activation| over all hidden units for this input —
    /// used to reject relu instances whose finite differences would
    /// straddle a kink.
    pub fn min_hidden_margin(&self, x: &[f64]) -> f64 {
        let n_layers = self.weights.len();
        let mut h: Vec<f64> = x.to_vec();
        let mut margin = f64::INFINITY;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z: Vec<f64> = w
                .iter()
                .zip(b)
                .map(|(row, &bias)| row.iter().zip(&h).map(|(&wv, &hv)| wv * hv).sum::<f64>() + bias)
                .collect();
            if i + 1 < n_layers {
                for v in z.iter_mut() {
                    margin = margin.min(v.abs());
                    *v = match self.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Tanh => v.tanh(),
                    };
                }
            }
            h = z;
        }
        margin
    }

    pub fn n_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.len() * w[0].len() + b.len())
            .sum()
    }

    /// Flat parameter addressing: all weights of layer 0 (row-major), then
    /// its biases, then layer 1, ...
    pub fn nudge(&mut self, flat: usize, delta: f64) {
        let mut idx = flat;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.len() * w[0].len();
            if idx < nw {
                let cols = w[0].len();
                w[idx / cols][idx % cols] += delta;
                return;
            }
            idx -= nw;
            if idx < b.len() {
                b[idx] += delta;
                return;
            }
            idx -= b.len();
        }
        panic!("flat index out of range");
    }
}

/// Flattens an `MlpParams` gradient in the same order as `RefNet::nudge`.
pub fn flatten_grads(g: &MlpParams) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &g.layers {
        out.extend(layer.w.iter().map(|&v| v as f64));
        out.extend(layer.b.iter().map(|&v| v as f64));
    }
    out
}

/// Central finite difference of `f` along flat parameter `i`.
pub fn central_fd<F: Fn(&RefNet) -> f64>(net: &RefNet, i: usize, h: f64, f: F) -> f64 {
    let mut plus = RefNet {
        weights: net.weights.clone(),
        biases: net.biases.clone(),
        activation: net.activation,
        head: net.head,
    };
    plus.nudge(i, h);
    let mut minus = RefNet {
        weights: net.weights.clone(),
        biases: net.biases.clone(),
        activation: net.activation,
        head: net.head,
    };
    minus.nudge(i, -h);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Norm-relative error between an autodiff gradient and its FD estimate.
pub fn rel_error(ad: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(ad.len(), fd.len());
    let diff: f64 = ad.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}
