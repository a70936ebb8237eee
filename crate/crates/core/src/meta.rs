//! Meta-training of the score network and both guidance classifiers.
//!
//! Each iteration samples a multi-domain batch, holds one domain out, takes
//! a single inner gradient step per model on the held-in data, evaluates the
//! adapted parameters on the held-out domain, and updates the base
//! parameters with the combined gradient `∇L_in + β·∇L_out`.
//!
//! The meta-test gradient is applied under the first-order approximation by
//! default: `∇L_out` is evaluated at the adapted parameters and added
//! directly, dropping second-derivative terms through the inner step. An
//! exact mode estimates the missing curvature term with a central-difference
//! Hessian-vector product; it exists for toy-scale verification, not
//! production training.
//!
//! The three models share no parameters and never interact inside one step,
//! so their updates commute.

use alloc::{format, vec::Vec};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{NoiseSchedule, ScoreDraws};
use crate::error::{Error, Result};
use crate::guidance::classifier_loss_with;
use crate::nn::{MlpParams, OptimizerState};
use crate::tabular::{DomainPartition, EncodedDataset};

/// The nine rates of the optimization procedure: inner step sizes α,
/// meta-test loss weights β, outer rates γ — one triple per model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaHyperparams {
    pub alpha_score: f32,
    pub alpha_y: f32,
    pub alpha_z: f32,
    pub beta_score: f32,
    pub beta_y: f32,
    pub beta_z: f32,
    pub gamma_score: f32,
    pub gamma_y: f32,
    pub gamma_z: f32,
}

impl Default for MetaHyperparams {
    fn default() -> Self {
        Self {
            alpha_score: 1e-3,
            alpha_y: 1e-3,
            alpha_z: 1e-3,
            beta_score: 1.0,
            beta_y: 1.0,
            beta_z: 1.0,
            gamma_score: 1e-3,
            gamma_y: 1e-3,
            gamma_z: 1e-3,
        }
    }
}

impl MetaHyperparams {
    pub fn validate(&self) -> Result<()> {
        let alphas = [self.alpha_score, self.alpha_y, self.alpha_z];
        let betas = [self.beta_score, self.beta_y, self.beta_z];
        let gammas = [self.gamma_score, self.gamma_y, self.gamma_z];
        if gammas.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Config("outer rates gamma must be positive".into()));
        }
        if alphas.iter().chain(betas.iter()).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("alpha and beta rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Held-in / held-out slices of one iteration's batch.
#[derive(Debug, Clone)]
pub struct MetaBatch {
    pub b_in: EncodedDataset,
    pub b_out: EncodedDataset,
    pub held_out_domain: usize,
}

/// Uniformly picks a held-out domain and samples rows per domain
/// proportionally to domain size, up to `batch_size` rows in total.
pub fn split_meta_batch(
    ds: &EncodedDataset,
    part: &DomainPartition,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MetaBatch> {
    if part.n_domains() < 2 {
        return Err(Error::Config("meta-training requires >= 2 source domains".into()));
    }
    if batch_size == 0 {
        return Err(Error::Usage("batch_size must be positive".into()));
    }
    let domains: Vec<usize> = part.groups.keys().copied().collect();
    let held = domains[rng.gen_range(0..domains.len())];
    let n_total = ds.n();

    let mut in_rows: Vec<usize> = Vec::new();
    let mut out_rows: Vec<usize> = Vec::new();
    for &dom in &domains {
        let rows = &part.groups[&dom];
        let share = batch_size as f64 * rows.len() as f64 / n_total as f64;
        let want = (libm::round(share) as usize).clamp(1, rows.len());
        let picked = rand::seq::index::sample(rng, rows.len(), want);
        let target = if dom == held { &mut out_rows } else { &mut in_rows };
        target.extend(picked.iter().map(|i| rows[i]));
    }
    Ok(MetaBatch {
        b_in: ds.select(&in_rows),
        b_out: ds.select(&out_rows),
        held_out_domain: held,
    })
}

/// Meta-gradient computation mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetaMode {
    /// Apply ∇L_out(adapted) directly to the base parameters.
    FirstOrder,
    /// Add the curvature correction `−α·H_in·∇L_out` estimated by a
    /// central finite difference with step `h` along ∇L_out.
    Exact { h: f32 },
}

/// Anything that behaves like a flat parameter vector under `x += a·y`.
pub trait ParamVec: Clone {
    fn axpy(&mut self, a: f32, other: &Self);
}

impl ParamVec for MlpParams {
    fn axpy(&mut self, a: f32, other: &Self) {
        MlpParams::axpy(self, a, other)
    }
}

/// Single plain gradient step at rate `alpha`; `alpha = 0` returns the
/// parameters unchanged (bit-exact).
pub fn inner_adapt<P: ParamVec>(params: &P, grads: &P, alpha: f32) -> P {
    let mut adapted = params.clone();
    if alpha != 0.0 {
        adapted.axpy(-alpha, grads);
    }
    adapted
}

/// Core of one model's meta update.
///
/// Returns `(L_in, L_out, total gradient)` where the total gradient is
/// `∇L_in(θ) + β·d/dθ L_out(θ − α∇L_in(θ))`, with the second term treated
/// per `mode`. `β = 0` skips the meta term entirely so the result is
/// bit-identical to a plain gradient on the held-in loss.
pub fn meta_gradient<P, Fin, Fout>(
    params: &P,
    loss_in: Fin,
    loss_out: Fout,
    alpha: f32,
    beta: f32,
    mode: MetaMode,
) -> Result<(f64, f64, P)>
where
    P: ParamVec,
    Fin: Fn(&P) -> Result<(f64, P)>,
    Fout: Fn(&P) -> Result<(f64, P)>,
{
    let (l_in, g_in) = loss_in(params)?;
    let adapted = inner_adapt(params, &g_in, alpha);
    let (l_out, g_out) = loss_out(&adapted)?;

    let mut total = g_in;
    if beta != 0.0 {
        match mode {
            MetaMode::FirstOrder => total.axpy(beta, &g_out),
            MetaMode::Exact { h } => {
                // d/dθ L_out(θ̂) = (I − α·H_in(θ))·∇L_out(θ̂); estimate
                // H_in·g_out by central differences of ∇L_in along g_out.
                let mut plus = params.clone();
                plus.axpy(h, &g_out);
                let mut minus = params.clone();
                minus.axpy(-h, &g_out);
                let (_, g_plus) = loss_in(&plus)?;
                let (_, g_minus) = loss_in(&minus)?;
                let mut corrected = g_out;
                let scale = alpha / (2.0 * h);
                corrected.axpy(-scale, &g_plus);
                corrected.axpy(scale, &g_minus);
                total.axpy(beta, &corrected);
            }
        }
    }
    Ok((l_in, l_out, total))
}

/// Which of the three jointly trained models a record refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Score,
    Label,
    Sensitive,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Score => "score",
            ModelKind::Label => "label",
            ModelKind::Sensitive => "sensitive",
        }
    }
}

/// Parameters and optimizer state of the three models.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub score: MlpParams,
    pub label: MlpParams,
    pub sens: MlpParams,
    pub opt_score: OptimizerState,
    pub opt_label: OptimizerState,
    pub opt_sens: OptimizerState,
    pub iteration: u64,
}

impl TrainState {
    /// Fresh state with SGD outer optimizers at the γ rates.
    pub fn new(score: MlpParams, label: MlpParams, sens: MlpParams, hp: &MetaHyperparams) -> Self {
        Self {
            opt_score: OptimizerState::sgd(hp.gamma_score),
            opt_label: OptimizerState::sgd(hp.gamma_y),
            opt_sens: OptimizerState::sgd(hp.gamma_z),
            score,
            label,
            sens,
            iteration: 0,
        }
    }

    /// Same, with adam outer optimizers.
    pub fn new_adam(score: MlpParams, label: MlpParams, sens: MlpParams, hp: &MetaHyperparams) -> Self {
        Self {
            opt_score: OptimizerState::adam(hp.gamma_score),
            opt_label: OptimizerState::adam(hp.gamma_y),
            opt_sens: OptimizerState::adam(hp.gamma_z),
            score,
            label,
            sens,
            iteration: 0,
        }
    }
}

/// Frozen randomness of one meta step: per-row (t, ε) draws for every
/// loss evaluation. Drawing them up front keeps each loss a deterministic
/// function of the parameters, which both meta modes rely on.
#[derive(Debug, Clone)]
pub struct MetaDraws {
    pub score_in: ScoreDraws,
    pub score_out: ScoreDraws,
    pub label_in: ScoreDraws,
    pub label_out: ScoreDraws,
    pub sens_in: ScoreDraws,
    pub sens_out: ScoreDraws,
}

pub fn draw_meta(sched: &NoiseSchedule, batch: &MetaBatch, rng: &mut ChaCha8Rng) -> MetaDraws {
    let (n_in, n_out, p) = (batch.b_in.n(), batch.b_out.n(), batch.b_in.width());
    MetaDraws {
        score_in: sched.draw_score_batch(n_in, p, rng),
        score_out: sched.draw_score_batch(n_out, p, rng),
        label_in: sched.draw_score_batch(n_in, p, rng),
        label_out: sched.draw_score_batch(n_out, p, rng),
        sens_in: sched.draw_score_batch(n_in, p, rng),
        sens_out: sched.draw_score_batch(n_out, p, rng),
    }
}

/// Per-model losses of one meta step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub score: (f64, f64),
    pub label: (f64, f64),
    pub sens: (f64, f64),
}

fn update_model<Fin, Fout>(
    params: &mut MlpParams,
    opt: &mut OptimizerState,
    loss_in: Fin,
    loss_out: Fout,
    alpha: f32,
    beta: f32,
    mode: MetaMode,
    kind: ModelKind,
) -> Result<(f64, f64)>
where
    Fin: Fn(&MlpParams) -> Result<(f64, MlpParams)>,
    Fout: Fn(&MlpParams) -> Result<(f64, MlpParams)>,
{
    let (l_in, l_out, total) = meta_gradient(params, loss_in, loss_out, alpha, beta, mode)
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("{} model: {msg}", kind.as_str())),
            other => other,
        })?;
    opt.step(params, &total).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("{} model: {msg}", kind.as_str())),
        other => other,
    })?;
    Ok((l_in, l_out))
}

/// One full meta step over the three models with pre-drawn randomness.
pub fn meta_step_with(
    sched: &NoiseSchedule,
    state: &mut TrainState,
    batch: &MetaBatch,
    hp: &MetaHyperparams,
    mode: MetaMode,
    draws: &MetaDraws,
) -> Result<StepLosses> {
    let (b_in, b_out) = (&batch.b_in, &batch.b_out);

    let score = update_model(
        &mut state.score,
        &mut state.opt_score,
        |p| sched.score_loss_with(p, b_in.x.view(), &draws.score_in),
        |p| sched.score_loss_with(p, b_out.x.view(), &draws.score_out),
        hp.alpha_score,
        hp.beta_score,
        mode,
        ModelKind::Score,
    )?;
    let label = update_model(
        &mut state.label,
        &mut state.opt_label,
        |p| classifier_loss_with(sched, p, b_in.x.view(), &b_in.y, &draws.label_in),
        |p| classifier_loss_with(sched, p, b_out.x.view(), &b_out.y, &draws.label_out),
        hp.alpha_y,
        hp.beta_y,
        mode,
        ModelKind::Label,
    )?;
    let sens = update_model(
        &mut state.sens,
        &mut state.opt_sens,
        |p| classifier_loss_with(sched, p, b_in.x.view(), &b_in.z, &draws.sens_in),
        |p| classifier_loss_with(sched, p, b_out.x.view(), &b_out.z, &draws.sens_out),
        hp.alpha_z,
        hp.beta_z,
        mode,
        ModelKind::Sensitive,
    )?;

    state.iteration += 1;
    Ok(StepLosses { score, label, sens })
}

/// Draws the step's randomness and applies `meta_step_with`.
pub fn meta_step(
    sched: &NoiseSchedule,
    state: &mut TrainState,
    batch: &MetaBatch,
    hp: &MetaHyperparams,
    mode: MetaMode,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    let draws = draw_meta(sched, batch, rng);
    meta_step_with(sched, state, batch, hp, mode, &draws)
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy)]
pub struct LossRecord {
    pub iteration: u64,
    pub model: ModelKind,
    pub loss_in: f64,
    pub loss_out: f64,
}

/// Training-loop configuration.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub mode: MetaMode,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { iterations: 1, batch_size: 256, mode: MetaMode::FirstOrder, checkpoint_interval: 0 }
    }
}

/// Runs the outer loop from `state.iteration` up to `cfg.iterations`.
///
/// Every iteration derives its own RNG substream from `(seed, iteration)`,
/// so a resumed run continues bit-identically to an uninterrupted one.
/// `on_checkpoint` fires every `checkpoint_interval` iterations and once at
/// the end.
pub fn fit<F>(
    sched: &NoiseSchedule,
    ds: &EncodedDataset,
    part: &DomainPartition,
    hp: &MetaHyperparams,
    cfg: &FitConfig,
    state: &mut TrainState,
    seed: u64,
    mut on_checkpoint: F,
) -> Result<Vec<LossRecord>>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    hp.validate()?;
    if part.n_domains() < 2 {
        return Err(Error::Config("meta-training requires >= 2 source domains".into()));
    }
    if cfg.iterations < 1 {
        return Err(Error::Usage("iterations must be >= 1".into()));
    }
    let mut history = Vec::new();
    while state.iteration < cfg.iterations {
        let iter = state.iteration;
        let mut rng = crate::rng::stream(seed, "train-iter", iter);
        let batch = split_meta_batch(ds, part, cfg.batch_size, &mut rng)?;
        let losses = meta_step(sched, state, &batch, hp, cfg.mode, &mut rng)?;
        for (model, (l_in, l_out)) in [
            (ModelKind::Score, losses.score),
            (ModelKind::Label, losses.label),
            (ModelKind::Sensitive, losses.sens),
        ] {
            history.push(LossRecord { iteration: iter, model, loss_in: l_in, loss_out: l_out });
        }
        if cfg.checkpoint_interval > 0 && state.iteration % cfg.checkpoint_interval == 0 {
            on_checkpoint(state)?;
        }
    }
    on_checkpoint(state)?;
    Ok(history)
}
