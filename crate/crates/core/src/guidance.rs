//! Classifier guidance and the fair-control sampler.
//!
//! Two time-conditioned classifiers steer the reverse SDE:
//! - the label classifier contributes `λ_y · ∇_x log p(y|x_t)`, pulling each
//!   chain toward its requested class;
//! - the sensitive classifier contributes `λ_z · ∇_x H(p(z|x_t))`, pushing
//!   chains into regions where the sensitive attribute is maximally
//!   uncertain. The fair-control signal is independent of the requested
//!   label, and its normalization constant is constant in x, so it never
//!   appears in any computed gradient.
//!
//! Both classifiers are trained on noise-perturbed inputs across all t, so
//! they stay accurate along the reverse trajectory where they are queried.

use alloc::{format, vec, vec::Vec};
use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{NoiseSchedule, ScoreDraws};
use crate::error::{Error, Result};
use crate::nn::{MlpParams, OutputHead};
use crate::tabular::EncodedDataset;
use crate::timefeat::{self, TIME_FEATURES};

/// Probabilities are clamped to this floor inside every log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Divergence threshold for sampling chains.
const DIVERGENCE_LIMIT: f32 = 1e4;

/// Guidance strengths; `(0, 0)` reproduces unconditional sampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceWeights {
    pub lambda_y: f32,
    pub lambda_z: f32,
}

impl GuidanceWeights {
    pub fn new(lambda_y: f32, lambda_z: f32) -> Result<Self> {
        if !(lambda_y.is_finite() && lambda_z.is_finite() && lambda_y >= 0.0 && lambda_z >= 0.0) {
            return Err(Error::Config("guidance weights must be finite and non-negative".into()));
        }
        Ok(Self { lambda_y, lambda_z })
    }

    pub fn none() -> Self {
        Self { lambda_y: 0.0, lambda_z: 0.0 }
    }
}

/// Per-sample target classes for one generation run.
#[derive(Debug, Clone)]
pub struct LabelRequest {
    pub labels: Vec<usize>,
}

impl LabelRequest {
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Usage("label request must cover at least one sample".into()));
        }
        if labels.iter().any(|&y| y >= n_classes) {
            return Err(Error::Usage(format!("label index out of range (vocabulary size {n_classes})")));
        }
        Ok(Self { labels })
    }
}

/// Which column a guidance classifier predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceTarget {
    Label,
    Sensitive,
}

fn check_classifier(net: &MlpParams, p: usize) -> Result<()> {
    if net.spec.output_head != OutputHead::LogSoftmax {
        return Err(Error::Usage("guidance classifier must use a log_softmax head".into()));
    }
    if net.spec.input_dim() != p + TIME_FEATURES {
        return Err(Error::Usage(format!(
            "classifier expects input dim {}, feature dim {} implies {}",
            net.spec.input_dim(),
            p,
            p + TIME_FEATURES
        )));
    }
    Ok(())
}

/// Cross-entropy of `net(x_t, t)` against `targets` on pre-drawn (t, ε).
///
/// Returns the mean loss and exact parameter gradients.
pub fn classifier_loss_with(
    sched: &NoiseSchedule,
    net: &MlpParams,
    x0: ArrayView2<f32>,
    targets: &[usize],
    draws: &ScoreDraws,
) -> Result<(f64, MlpParams)> {
    let (n, p) = (x0.nrows(), x0.ncols());
    if n == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    check_classifier(net, p)?;
    debug_assert_eq!(targets.len(), n);

    let k = net.spec.output_dim();
    let mut x_t = Array2::zeros((n, p));
    let mut t32 = vec![0.0f32; n];
    for i in 0..n {
        let c = sched.coefficients(draws.t[i])?;
        let (m, s) = (c.mean_coeff as f32, c.sigma as f32);
        t32[i] = draws.t[i] as f32;
        for j in 0..p {
            x_t[[i, j]] = m * x0[[i, j]] + s * draws.eps[[i, j]];
        }
    }
    let input = timefeat::augment_batch(x_t.view(), &t32);
    let logp = net.forward(input.view())?;

    let mut loss = 0.0f64;
    let inv_n = 1.0 / n as f64;
    let mut upstream = Array2::zeros((n, k));
    for (i, &y) in targets.iter().enumerate() {
        if y >= k {
            return Err(Error::Usage(format!("target class {y} out of range ({k} classes)")));
        }
        let lp = (logp[[i, y]] as f64).max(libm::log(PROB_FLOOR));
        loss -= lp * inv_n;
        upstream[[i, y]] = -(inv_n as f32);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite classifier loss".into()));
    }
    let bundle = net.backward(input.view(), upstream.view(), false)?;
    Ok((loss, bundle.param_grads))
}

/// One training evaluation of a guidance classifier on fresh (t, ε) draws.
pub fn train_guidance_classifier(
    sched: &NoiseSchedule,
    net: &MlpParams,
    ds: &EncodedDataset,
    target: GuidanceTarget,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, MlpParams)> {
    if ds.n() == 0 {
        return Err(Error::Usage("empty dataset".into()));
    }
    let draws = sched.draw_score_batch(ds.n(), ds.width(), rng);
    let targets = match target {
        GuidanceTarget::Label => &ds.y,
        GuidanceTarget::Sensitive => &ds.z,
    };
    classifier_loss_with(sched, net, ds.x.view(), targets, &draws)
}

/// Exact input gradient of `log p(y | x, t)` with respect to `x`.
pub fn label_grad(net: &MlpParams, x: &[f32], t: f64, y: usize) -> Result<Vec<f32>> {
    check_classifier(net, x.len())?;
    let k = net.spec.output_dim();
    if y >= k {
        return Err(Error::Usage(format!("class {y} out of range ({k} classes)")));
    }
    let input = timefeat::augment_row(x, t as f32);
    let input = ArrayView2::from_shape((1, input.len()), &input).unwrap().to_owned();
    let mut upstream = Array2::zeros((1, k));
    upstream[[0, y]] = 1.0;
    let bundle = net.backward(input.view(), upstream.view(), true)?;
    let full = bundle.input_grad.unwrap();
    Ok(full.row(0).to_vec()[..x.len()].to_vec())
}

/// Entropy of the sensitive posterior and its exact input gradient.
///
/// `H = −Σ_k p_k ln p_k` with log-probabilities clamped to `ln(1e-12)`.
pub fn entropy_grad(net: &MlpParams, x: &[f32], t: f64) -> Result<(f64, Vec<f32>)> {
    check_classifier(net, x.len())?;
    let input = timefeat::augment_row(x, t as f32);
    let input = ArrayView2::from_shape((1, input.len()), &input).unwrap().to_owned();
    let logp = net.forward(input.view())?;
    let (h, upstream) = entropy_upstream(logp.row(0).as_slice().unwrap());
    let upstream = Array2::from_shape_vec((1, upstream.len()), upstream).unwrap();
    let bundle = net.backward(input.view(), upstream.view(), true)?;
    let full = bundle.input_grad.unwrap();
    Ok((h, full.row(0).to_vec()[..x.len()].to_vec()))
}

/// Entropy value and the cotangent w.r.t. the log-probability outputs:
/// `dH/dl_k = −p_k (l_k + 1)`.
fn entropy_upstream(logp: &[f32]) -> (f64, Vec<f32>) {
    let floor = libm::log(PROB_FLOOR);
    let mut h = 0.0f64;
    let mut up = Vec::with_capacity(logp.len());
    for &l in logp {
        let l = (l as f64).max(floor);
        let p = libm::exp(l);
        h -= p * l;
        up.push((-p * (l + 1.0)) as f32);
    }
    (h, up)
}

fn clip_term(term: &mut [f32], limit: f32) {
    for v in term.iter_mut() {
        *v = v.clamp(-limit, limit);
    }
}

/// The composed guided score
/// `s_θ(x,t) + λ_y·∇_x log p(y|x) + λ_z·∇_x H(p(z|x))`.
///
/// With `clip` set, each guidance term is clamped componentwise to
/// `±10/σ(t)` before summation; classifier gradients blow up near saturated
/// regions at small t.
pub fn guided_score(
    score_net: &MlpParams,
    label_net: &MlpParams,
    sens_net: &MlpParams,
    sched: &NoiseSchedule,
    x: &[f32],
    t: f64,
    y: usize,
    w: &GuidanceWeights,
    clip: bool,
) -> Result<Vec<f32>> {
    let input = timefeat::augment_row(x, t as f32);
    let mut score = score_net.forward_one(&input)?;
    if score.len() != x.len() {
        return Err(Error::Usage("score network output dim must equal the feature dim".into()));
    }
    let limit = (10.0 / sched.coefficients(t)?.sigma.max(1e-6)) as f32;
    if w.lambda_y > 0.0 {
        let mut term: Vec<f32> = label_grad(label_net, x, t, y)?
            .iter()
            .map(|g| w.lambda_y * g)
            .collect();
        if clip {
            clip_term(&mut term, limit);
        }
        for (s, g) in score.iter_mut().zip(&term) {
            *s += g;
        }
    }
    if w.lambda_z > 0.0 {
        let (_, grad) = entropy_grad(sens_net, x, t)?;
        let mut term: Vec<f32> = grad.iter().map(|g| w.lambda_z * g).collect();
        if clip {
            clip_term(&mut term, limit);
        }
        for (s, g) in score.iter_mut().zip(&term) {
            *s += g;
        }
    }
    for (i, v) in score.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite guided score component {i} at t = {t}")));
        }
    }
    Ok(score)
}

/// Batched guided score used by the sampler.
fn guided_score_batch(
    score_net: &MlpParams,
    label_net: &MlpParams,
    sens_net: &MlpParams,
    sched: &NoiseSchedule,
    x: ArrayView2<f32>,
    t: f64,
    labels: &[usize],
    w: &GuidanceWeights,
    clip: bool,
) -> Result<Array2<f32>> {
    let (n, p) = (x.nrows(), x.ncols());
    let t32 = vec![t as f32; n];
    let input = timefeat::augment_batch(x, &t32);
    let mut score = score_net.forward(input.view())?;
    let limit = (10.0 / sched.coefficients(t)?.sigma.max(1e-6)) as f32;

    if w.lambda_y > 0.0 {
        let k = label_net.spec.output_dim();
        let mut upstream = Array2::zeros((n, k));
        for (i, &y) in labels.iter().enumerate() {
            upstream[[i, y]] = 1.0;
        }
        let bundle = label_net.backward(input.view(), upstream.view(), true)?;
        let grad = bundle.input_grad.unwrap();
        for i in 0..n {
            for j in 0..p {
                let mut g = w.lambda_y * grad[[i, j]];
                if clip {
                    g = g.clamp(-limit, limit);
                }
                score[[i, j]] += g;
            }
        }
    }
    if w.lambda_z > 0.0 {
        let logp = sens_net.forward(input.view())?;
        let k = sens_net.spec.output_dim();
        let mut upstream = Array2::zeros((n, k));
        for i in 0..n {
            let (_, up) = entropy_upstream(logp.row(i).as_slice().unwrap());
            for (j, u) in up.into_iter().enumerate() {
                upstream[[i, j]] = u;
            }
        }
        let bundle = sens_net.backward(input.view(), upstream.view(), true)?;
        let grad = bundle.input_grad.unwrap();
        for i in 0..n {
            for j in 0..p {
                let mut g = w.lambda_z * grad[[i, j]];
                if clip {
                    g = g.clamp(-limit, limit);
                }
                score[[i, j]] += g;
            }
        }
    }
    Ok(score)
}

/// Runs the full conditional sampler: `n` chains from N(0, I) integrated
/// from t = 1 down to t_eps with the guided score.
///
/// Each chain owns an RNG substream derived from `(seed, chain index)`, so
/// the output is deterministic and independent of any batching or
/// scheduling of chains.
pub fn generate(
    score_net: &MlpParams,
    label_net: &MlpParams,
    sens_net: &MlpParams,
    sched: &NoiseSchedule,
    req: &LabelRequest,
    w: &GuidanceWeights,
    clip: bool,
    seed: u64,
) -> Result<Array2<f32>> {
    let p = score_net.spec.output_dim();
    if score_net.spec.input_dim() != p + TIME_FEATURES {
        return Err(Error::Usage("score network input dim must be feature dim + 17".into()));
    }
    if w.lambda_y > 0.0 {
        check_classifier(label_net, p)?;
    }
    if w.lambda_z > 0.0 {
        check_classifier(sens_net, p)?;
    }
    let n = req.labels.len();

    let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| crate::rng::stream(seed, "chain", i as u64)).collect();
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            x[[i, j]] = crate::rng::standard_normal(&mut rngs[i]);
        }
    }

    for (step, (t, dt)) in sched.timesteps().into_iter().enumerate() {
        let drift = guided_score_batch(score_net, label_net, sens_net, sched, x.view(), t, &req.labels, w, clip)?;
        for i in 0..n {
            let xi = x.row(i).to_vec();
            let di = drift.row(i).to_vec();
            let next = sched.reverse_step(&xi, t, dt, &di, &mut rngs[i]).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("chain {i}, step {step}: {msg}")),
                other => other,
            })?;
            for (j, v) in next.iter().enumerate() {
                if v.abs() > DIVERGENCE_LIMIT {
                    return Err(Error::Numeric(format!(
                        "chain {i} diverged at step {step} (|x| > {DIVERGENCE_LIMIT})"
                    )));
                }
                x[[i, j]] = *v;
            }
        }
    }
    Ok(x)
}
