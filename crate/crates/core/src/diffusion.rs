//! Variance-preserving diffusion: noise schedule, forward perturbation
//! kernel, denoising score-matching loss and the reverse-SDE Euler–Maruyama
//! step.
//!
//! Forward dynamics: `dx = −½β(t)·x dt + √β(t) dw` with the linear schedule
//! `β(t) = β_min + t·(β_max − β_min)` on `t ∈ [0, 1]`. The marginal kernel is
//! `x_t = m(t)·x_0 + s(t)·ε` with `m(t) = exp(−½∫β)` and `s² = 1 − m²`
//! (variance preserving: `m² + s² = 1`).

use alloc::{format, vec, vec::Vec};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::MlpParams;
use crate::rng::standard_normal;
use crate::timefeat;

/// Linear β(t) schedule with its sampling discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Number of reverse-integration steps between t = 1 and t = t_eps.
    pub n_steps: usize,
    /// Lower time cutoff; σ → 0 at t = 0 makes the −ε/σ target unbounded.
    pub t_eps: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0, n_steps: 1000, t_eps: 1e-3 }
    }
}

/// Closed-form coefficients of the perturbation kernel at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coeffs {
    pub beta: f64,
    pub mean_coeff: f64,
    pub sigma: f64,
}

/// Perturbed sample together with the noise draw that produced it.
#[derive(Debug, Clone)]
pub struct PerturbSample {
    pub x_t: Vec<f32>,
    pub eps: Vec<f32>,
    pub mean_coeff: f32,
    pub sigma: f32,
}

/// Frozen per-row randomness of one score-loss evaluation, so the same loss
/// can be re-evaluated at different parameters (meta-learning needs this).
#[derive(Debug, Clone)]
pub struct ScoreDraws {
    pub t: Vec<f64>,
    pub eps: Array2<f32>,
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_max > self.beta_min) {
            return Err(Error::Config(format!(
                "need 0 < beta_min < beta_max, got {} / {}",
                self.beta_min, self.beta_max
            )));
        }
        if self.n_steps == 0 || !(self.t_eps > 0.0 && self.t_eps < 1.0) {
            return Err(Error::Config("n_steps must be positive and 0 < t_eps < 1".into()));
        }
        Ok(())
    }

    /// β(t), m(t) = exp(−½(β_min·t + ½(β_max−β_min)·t²)) and σ(t) = √(1−m²).
    pub fn coefficients(&self, t: f64) -> Result<Coeffs> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Usage(format!("t = {t} outside [0, 1]")));
        }
        let beta = self.beta_min + t * (self.beta_max - self.beta_min);
        let integral = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t;
        let mean_coeff = libm::exp(-0.5 * integral);
        let sigma = libm::sqrt((1.0 - mean_coeff * mean_coeff).max(0.0));
        Ok(Coeffs { beta, mean_coeff, sigma })
    }

    /// Draws `x_t = m(t)·x_0 + σ(t)·ε`, recording ε.
    pub fn perturb(&self, x0: &[f32], t: f64, rng: &mut ChaCha8Rng) -> Result<PerturbSample> {
        let c = self.coefficients(t)?;
        let (m, s) = (c.mean_coeff as f32, c.sigma as f32);
        let eps: Vec<f32> = (0..x0.len()).map(|_| standard_normal(rng)).collect();
        let x_t = x0.iter().zip(&eps).map(|(&x, &e)| m * x + s * e).collect();
        Ok(PerturbSample { x_t, eps, mean_coeff: m, sigma: s })
    }

    /// Per-row t ~ U[t_eps, 1] and ε ~ N(0, I) for an `n × p` batch.
    pub fn draw_score_batch(&self, n: usize, p: usize, rng: &mut ChaCha8Rng) -> ScoreDraws {
        let t: Vec<f64> = (0..n)
            .map(|_| self.t_eps + (1.0 - self.t_eps) * rng.gen::<f64>())
            .collect();
        let eps = Array2::from_shape_fn((n, p), |_| standard_normal(rng));
        ScoreDraws { t, eps }
    }

    /// Denoising score-matching loss with the σ² weighting, which reduces
    /// each term to `‖σ·s_θ(x_t, t) + ε‖²`; returns the batch mean and exact
    /// parameter gradients.
    pub fn score_loss_with(
        &self,
        score_net: &MlpParams,
        batch: ArrayView2<f32>,
        draws: &ScoreDraws,
    ) -> Result<(f64, MlpParams)> {
        let (n, p) = (batch.nrows(), batch.ncols());
        if n == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        debug_assert_eq!(draws.t.len(), n);

        let mut sigmas = vec![0.0f32; n];
        let mut t32 = vec![0.0f32; n];
        let mut x_t = Array2::zeros((n, p));
        for i in 0..n {
            let c = self.coefficients(draws.t[i])?;
            let (m, s) = (c.mean_coeff as f32, c.sigma as f32);
            sigmas[i] = s;
            t32[i] = draws.t[i] as f32;
            for j in 0..p {
                x_t[[i, j]] = m * batch[[i, j]] + s * draws.eps[[i, j]];
            }
        }

        let input = timefeat::augment_batch(x_t.view(), &t32);
        let pred = score_net.forward(input.view())?;

        // residual r = σ·s_θ + ε; loss = mean_i Σ_j r²; dL/ds_θ = 2σr/n
        let mut loss = 0.0f64;
        let mut upstream = Array2::zeros((n, p));
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let s = sigmas[i];
            let mut row = 0.0f64;
            for j in 0..p {
                let r = s * pred[[i, j]] + draws.eps[[i, j]];
                row += (r as f64) * (r as f64);
                upstream[[i, j]] = (2.0 * s as f64 * r as f64 * inv_n) as f32;
            }
            loss += row * inv_n;
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite score loss".into()));
        }
        let bundle = score_net.backward(input.view(), upstream.view(), false)?;
        Ok((loss, bundle.param_grads))
    }

    /// Convenience wrapper drawing fresh (t, ε) per row.
    pub fn score_loss(
        &self,
        score_net: &MlpParams,
        batch: ArrayView2<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, MlpParams)> {
        let draws = self.draw_score_batch(batch.nrows(), batch.ncols(), rng);
        self.score_loss_with(score_net, batch, &draws)
    }

    /// One Euler–Maruyama update of the reverse SDE:
    /// `x' = x + [½β(t)x + β(t)·drift_score]·dt + √(β(t)·dt)·ξ`.
    ///
    /// The noise term is omitted once the step lands at or below `t_eps`
    /// (the final step of an integration), so the last update is
    /// deterministic given the penultimate state.
    pub fn reverse_step(
        &self,
        x: &[f32],
        t: f64,
        dt: f64,
        drift_score: &[f32],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f32>> {
        if dt <= 0.0 || t - dt < -1e-12 {
            return Err(Error::Usage(format!("invalid step: t = {t}, dt = {dt}")));
        }
        if drift_score.len() != x.len() {
            return Err(Error::Usage("drift_score length mismatch".into()));
        }
        let beta = self.coefficients(t)?.beta;
        let last = t - dt <= self.t_eps + 1e-12;
        let noise_scale = if last { 0.0 } else { libm::sqrt(beta * dt) as f32 };
        let (b32, dt32) = (beta as f32, dt as f32);
        let mut out = Vec::with_capacity(x.len());
        for (i, (&xi, &si)) in x.iter().zip(drift_score).enumerate() {
            let mut v = xi + (0.5 * b32 * xi + b32 * si) * dt32;
            if noise_scale > 0.0 {
                v += noise_scale * standard_normal(rng);
            }
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite state in reverse step at t = {t}, coordinate {i}"
                )));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// The uniform reverse-time grid: `n_steps` pairs `(t, dt)` going from
    /// t = 1 down to t = t_eps.
    pub fn timesteps(&self) -> Vec<(f64, f64)> {
        let dt = (1.0 - self.t_eps) / self.n_steps as f64;
        (0..self.n_steps).map(|k| (1.0 - k as f64 * dt, dt)).collect()
    }
}
