//! Minimal dense-network engine.
//!
//! Fixed-topology multilayer perceptrons with exact reverse-mode gradients
//! for both parameters and inputs. Input gradients are what make classifier
//! guidance possible: the sampler needs `∇_x log p(y|x)` and `∇_x H(p(z|x))`
//! at every reverse step.
//!
//! Parameters are 32-bit floats; reductions (log-sum-exp, loss sums)
//! accumulate in 64 bits.

use alloc::{format, vec::Vec};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Transformation applied to the final layer's affine output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    Linear,
    LogSoftmax,
}

/// Network shape: `layer_widths[0]` is the input dimension, the last entry
/// the output dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub output_head: OutputHead,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, output_head: OutputHead) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::Usage(format!(
                "layer_widths needs at least 2 entries, got {}",
                layer_widths.len()
            )));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Usage("all layer widths must be >= 1".into()));
        }
        Ok(Self { layer_widths, activation, output_head })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

/// One dense layer: weights are `out × in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

/// Parameters of an MLP (doubles as the gradient container, which keeps
/// first-order meta updates a plain axpy).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub param_grads: MlpParams,
    /// Present only when requested; one row per input row.
    pub input_grad: Option<Array2<f32>>,
}

fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl MlpParams {
    /// Random initialization: He scaling for relu, Xavier otherwise, zero bias.
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(spec.n_layers());
        for i in 0..spec.n_layers() {
            let (fan_in, fan_out) = (spec.layer_widths[i], spec.layer_widths[i + 1]);
            let scale = match spec.activation {
                Activation::Relu => libm::sqrtf(2.0 / fan_in as f32),
                Activation::Tanh => libm::sqrtf(1.0 / fan_in as f32),
            };
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                crate::rng::standard_normal(rng) * scale
            });
            layers.push(Layer { w, b: Array1::zeros(fan_out) });
        }
        Self { spec, layers }
    }

    /// All-zero parameters with the same shape (gradient accumulator).
    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = (0..spec.n_layers())
            .map(|i| Layer {
                w: Array2::zeros((spec.layer_widths[i + 1], spec.layer_widths[i])),
                b: Array1::zeros(spec.layer_widths[i + 1]),
            })
            .collect();
        Self { spec, layers }
    }

    /// `self += a * other`, layer by layer.
    pub fn axpy(&mut self, a: f32, other: &MlpParams) {
        for (l, g) in self.layers.iter_mut().zip(&other.layers) {
            l.w.zip_mut_with(&g.w, |x, &y| *x += a * y);
            l.b.zip_mut_with(&g.b, |x, &y| *x += a * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.spec.input_dim() {
            return Err(Error::Usage(format!(
                "input has {} columns, network expects {}",
                cols,
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    /// Batch forward pass; rows are independent samples.
    pub fn forward(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        self.check_input(x.ncols())?;
        Ok(self.forward_cached(x).pop().unwrap())
    }

    /// Convenience wrapper for a single row.
    pub fn forward_one(&self, x: &[f32]) -> Result<Vec<f32>> {
        let view = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Usage(format!("bad input shape: {e}")))?;
        Ok(self.forward(view)?.row(0).to_vec())
    }

    /// Forward pass keeping every post-activation (index 0 is the input
    /// itself, last is the head output).
    fn forward_cached(&self, x: ArrayView2<f32>) -> Vec<Array2<f32>> {
        let n_layers = self.spec.n_layers();
        let mut acts: Vec<Array2<f32>> = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.w.t());
            z += &layer.b;
            if i + 1 < n_layers {
                match self.spec.activation {
                    Activation::Relu => z.mapv_inplace(relu),
                    Activation::Tanh => z.mapv_inplace(libm::tanhf),
                }
            } else if self.spec.output_head == OutputHead::LogSoftmax {
                log_softmax_rows(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    /// Exact reverse-mode derivative of `⟨upstream, forward(x)⟩`.
    ///
    /// `upstream` carries one cotangent row per input row; parameter
    /// gradients are summed over rows. When `want_input_grad` is set the
    /// bundle also carries `d⟨u, f(x)⟩/dx` row by row.
    pub fn backward(
        &self,
        x: ArrayView2<f32>,
        upstream: ArrayView2<f32>,
        want_input_grad: bool,
    ) -> Result<GradientBundle> {
        self.check_input(x.ncols())?;
        if upstream.nrows() != x.nrows() || upstream.ncols() != self.spec.output_dim() {
            return Err(Error::Usage(format!(
                "upstream shape {:?} does not match ({}, {})",
                (upstream.nrows(), upstream.ncols()),
                x.nrows(),
                self.spec.output_dim()
            )));
        }

        let acts = self.forward_cached(x);
        let n_layers = self.spec.n_layers();
        let mut grads = MlpParams::zeros(self.spec.clone());

        // Cotangent w.r.t. the last affine output.
        let mut dz: Array2<f32> = match self.spec.output_head {
            OutputHead::Linear => upstream.to_owned(),
            OutputHead::LogSoftmax => {
                // d/dz ⟨u, log_softmax(z)⟩ = u − softmax(z) · Σ_j u_j
                let logp = &acts[n_layers];
                let mut dz = upstream.to_owned();
                for (mut dzr, (lr, ur)) in
                    dz.axis_iter_mut(Axis(0)).zip(logp.axis_iter(Axis(0)).zip(upstream.axis_iter(Axis(0))))
                {
                    let s: f64 = ur.iter().map(|&u| u as f64).sum();
                    for (d, &l) in dzr.iter_mut().zip(lr.iter()) {
                        *d -= libm::expf(l) * s as f32;
                    }
                }
                dz
            }
        };

        let mut input_grad = None;
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            grads.layers[i].w = dz.t().dot(&acts[i]);
            grads.layers[i].b = dz.sum_axis(Axis(0));
            if !grads.layers[i].w.iter().all(|v| v.is_finite())
                || !grads.layers[i].b.iter().all(|v| v.is_finite())
            {
                return Err(Error::Numeric(format!("non-finite gradient in layer {i}")));
            }
            if i == 0 {
                if want_input_grad {
                    input_grad = Some(dz.dot(&layer.w));
                }
            } else {
                let mut dh = dz.dot(&layer.w);
                // Through the hidden activation of layer i-1.
                match self.spec.activation {
                    Activation::Relu => {
                        dh.zip_mut_with(&acts[i], |d, &a| {
                            if a <= 0.0 {
                                *d = 0.0
                            }
                        });
                    }
                    Activation::Tanh => {
                        dh.zip_mut_with(&acts[i], |d, &a| *d *= 1.0 - a * a);
                    }
                }
                dz = dh;
            }
        }

        if let Some(g) = &input_grad {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric("non-finite input gradient".into()));
            }
        }
        Ok(GradientBundle { param_grads: grads, input_grad })
    }
}

/// Row-wise log-softmax with f64 accumulation in the log-sum-exp.
fn log_softmax_rows(z: &mut Array2<f32>) {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|&v| libm::exp((v - max) as f64)).sum();
        let lse = max as f64 + libm::log(sum);
        for v in row.iter_mut() {
            *v = (*v as f64 - lse) as f32;
        }
    }
}

/// First-order optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum OptMethod {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub method: OptMethod,
    pub learning_rate: f32,
    pub step_count: u64,
    m: Option<MlpParams>,
    v: Option<MlpParams>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f32) -> Self {
        Self { method: OptMethod::Sgd, learning_rate, step_count: 0, m: None, v: None }
    }

    pub fn adam(learning_rate: f32) -> Self {
        Self {
            method: OptMethod::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            learning_rate,
            step_count: 0,
            m: None,
            v: None,
        }
    }

    /// Adam moment estimates, if any have been accumulated yet.
    pub fn moments(&self) -> Option<(&MlpParams, &MlpParams)> {
        match (&self.m, &self.v) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    /// Restores previously saved adam moments (checkpoint resume).
    pub fn set_moments(&mut self, m: MlpParams, v: MlpParams) {
        self.m = Some(m);
        self.v = Some(v);
    }

    /// Applies one update in place. SGD is exactly `p -= lr·g`; adam uses
    /// standard bias-corrected moments.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradients in optimizer step".into()));
        }
        self.step_count += 1;
        match self.method {
            OptMethod::Sgd => params.axpy(-self.learning_rate, grads),
            OptMethod::Adam { beta1, beta2, eps } => {
                if self.m.is_none() {
                    self.m = Some(MlpParams::zeros(params.spec.clone()));
                    self.v = Some(MlpParams::zeros(params.spec.clone()));
                }
                let (m, v) = (self.m.as_mut().unwrap(), self.v.as_mut().unwrap());
                let t = self.step_count as f64;
                let bc1 = 1.0 - libm::pow(beta1 as f64, t);
                let bc2 = 1.0 - libm::pow(beta2 as f64, t);
                let lr = self.learning_rate;
                for li in 0..params.layers.len() {
                    let g = &grads.layers[li];
                    let ml = &mut m.layers[li];
                    let vl = &mut v.layers[li];
                    ml.w.zip_mut_with(&g.w, |mm, &gg| *mm = beta1 * *mm + (1.0 - beta1) * gg);
                    ml.b.zip_mut_with(&g.b, |mm, &gg| *mm = beta1 * *mm + (1.0 - beta1) * gg);
                    vl.w.zip_mut_with(&g.w, |vv, &gg| *vv = beta2 * *vv + (1.0 - beta2) * gg * gg);
                    vl.b.zip_mut_with(&g.b, |vv, &gg| *vv = beta2 * *vv + (1.0 - beta2) * gg * gg);
                    let p = &mut params.layers[li];
                    ndarray::Zip::from(&mut p.w).and(&ml.w).and(&vl.w).for_each(|pw, &mm, &vv| {
                        let mhat = mm as f64 / bc1;
                        let vhat = vv as f64 / bc2;
                        *pw -= (lr as f64 * mhat / (libm::sqrt(vhat) + eps as f64)) as f32;
                    });
                    ndarray::Zip::from(&mut p.b).and(&ml.b).and(&vl.b).for_each(|pb, &mm, &vv| {
                        let mhat = mm as f64 / bc1;
                        let vhat = vv as f64 / bc2;
                        *pb -= (lr as f64 * mhat / (libm::sqrt(vhat) + eps as f64)) as f32;
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn spec(widths: &[usize], head: OutputHead) -> MlpSpec {
        MlpSpec::new(widths.to_vec(), Activation::Relu, head).unwrap()
    }

    fn single_layer(w: Array2<f32>, b: Array1<f32>, head: OutputHead) -> MlpParams {
        let s = spec(&[w.ncols(), w.nrows()], head);
        MlpParams { spec: s, layers: vec![Layer { w, b }] }
    }

    #[test]
    fn affine_identity_case() {
        let net = single_layer(array![[2.0]], array![1.0], OutputHead::Linear);
        assert_eq!(net.forward_one(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let net = single_layer(Array2::zeros((3, 2)), array![1.0, -2.0, 0.5], OutputHead::Linear);
        assert_eq!(net.forward_one(&[9.0, -4.0]).unwrap(), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn log_softmax_symmetric_logits() {
        let net = single_layer(Array2::zeros((2, 1)), array![0.0, 0.0], OutputHead::LogSoftmax);
        let out = net.forward_one(&[1.0]).unwrap();
        let ln2 = core::f32::consts::LN_2;
        assert_abs_diff_eq!(out[0], -ln2, epsilon = 1e-6);
        assert_abs_diff_eq!(out[1], -ln2, epsilon = 1e-6);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let s = MlpSpec::new(vec![3, 8, 5], Activation::Tanh, OutputHead::LogSoftmax).unwrap();
        let mut rng = crate::rng::stream(11, "test", 0);
        let net = MlpParams::init(s, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| crate::rng::standard_normal(&mut rng));
        let out = net.forward(x.view()).unwrap();
        for row in out.axis_iter(Axis(0)) {
            let total: f64 = row.iter().map(|&v| libm::exp(v as f64)).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn backward_hand_chain_rule() {
        let net = single_layer(array![[2.0]], array![0.0], OutputHead::Linear);
        let x = array![[3.0f32]];
        let u = array![[1.0f32]];
        let g = net.backward(x.view(), u.view(), true).unwrap();
        assert_eq!(g.param_grads.layers[0].w[[0, 0]], 3.0);
        assert_eq!(g.param_grads.layers[0].b[0], 1.0);
        assert_eq!(g.input_grad.unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let s = spec(&[2, 4, 3], OutputHead::Linear);
        let mut rng = crate::rng::stream(3, "test", 0);
        let net = MlpParams::init(s, &mut rng);
        let x = array![[0.4f32, -1.2]];
        let u = Array2::zeros((1, 3));
        let g = net.backward(x.view(), u.view(), true).unwrap();
        assert!(g.param_grads.layers.iter().all(|l| l.w.iter().all(|&v| v == 0.0)));
        assert!(g.input_grad.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_usage_error() {
        let net = single_layer(array![[2.0]], array![0.0], OutputHead::Linear);
        let x = array![[1.0f32, 2.0]];
        assert!(matches!(net.forward(x.view()), Err(Error::Usage(_))));
    }

    #[test]
    fn sgd_step_exact() {
        let mut net = single_layer(array![[1.0]], array![0.0], OutputHead::Linear);
        let grads = single_layer(array![[2.0]], array![0.0], OutputHead::Linear);
        let mut opt = OptimizerState::sgd(0.1);
        opt.step(&mut net, &grads).unwrap();
        assert_abs_diff_eq!(net.layers[0].w[[0, 0]], 0.8, epsilon = 1e-7);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut net = single_layer(array![[1.0]], array![0.5], OutputHead::Linear);
        let before = net.clone();
        let grads = single_layer(array![[2.0]], array![3.0], OutputHead::Linear);
        OptimizerState::sgd(0.0).step(&mut net, &grads).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_first_step_magnitude_near_lr() {
        // bias-corrected step 1: update = lr * g / (|g| + eps') ≈ lr for any |g| > 0
        for &g in &[0.001f32, 0.5, 40.0] {
            let mut net = single_layer(array![[1.0]], array![0.0], OutputHead::Linear);
            let grads = single_layer(array![[g]], array![0.0], OutputHead::Linear);
            let mut opt = OptimizerState::adam(0.01);
            opt.step(&mut net, &grads).unwrap();
            let delta = (1.0 - net.layers[0].w[[0, 0]]).abs();
            assert_abs_diff_eq!(delta, 0.01, epsilon = 1e-4);
        }
    }

    #[test]
    fn non_finite_grads_rejected() {
        let mut net = single_layer(array![[1.0]], array![0.0], OutputHead::Linear);
        let grads = single_layer(array![[f32::NAN]], array![0.0], OutputHead::Linear);
        assert!(matches!(
            OptimizerState::sgd(0.1).step(&mut net, &grads),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let s = spec(&[3, 8, 2], OutputHead::Linear);
        let mut rng1 = crate::rng::stream(42, "det", 0);
        let mut rng2 = crate::rng::stream(42, "det", 0);
        let a = MlpParams::init(s.clone(), &mut rng1);
        let b = MlpParams::init(s, &mut rng2);
        let x = array![[0.1f32, 0.2, 0.3]];
        assert_eq!(a.forward(x.view()).unwrap(), b.forward(x.view()).unwrap());
    }
}
