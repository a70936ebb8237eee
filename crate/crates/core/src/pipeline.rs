//! End-to-end orchestration: build the three networks, train them, sample a
//! synthetic dataset, train the downstream classifier and run
//! leave-one-domain-out model selection.

use alloc::{format, vec, vec::Vec};
use ndarray::Array2;
use rand::Rng;

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::fairness::{self, DownstreamConfig};
use crate::guidance::{self, GuidanceWeights, LabelRequest};
use crate::meta::{self, FitConfig, LossRecord, MetaHyperparams, TrainState};
use crate::nn::{Activation, MlpParams, MlpSpec, OutputHead};
use crate::tabular::{split_domains, DomainPartition, EncodedDataset};
use crate::timefeat::TIME_FEATURES;

/// Hidden-layer widths of the three generative-side networks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSizes {
    pub score_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
}

impl Default for NetworkSizes {
    fn default() -> Self {
        Self { score_hidden: vec![256, 256, 256], classifier_hidden: vec![128, 128] }
    }
}

/// How target labels are assigned to generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelPolicy {
    /// Match the empirical label distribution of the source data.
    Prior,
    /// Every sample gets the same class.
    Fixed(usize),
    /// Uniform over the label vocabulary.
    Uniform,
}

/// Everything needed to run one full generator configuration.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub sched: NoiseSchedule,
    pub nets: NetworkSizes,
    pub meta: MetaHyperparams,
    pub fit: FitConfig,
    pub weights: GuidanceWeights,
    pub clip_guidance: bool,
    /// Adam outer optimizers instead of plain SGD at the γ rates.
    pub adam_outer: bool,
    pub n_samples: usize,
    pub label_policy: LabelPolicy,
    pub downstream: DownstreamConfig,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            sched: NoiseSchedule::default(),
            nets: NetworkSizes::default(),
            meta: MetaHyperparams::default(),
            fit: FitConfig::default(),
            weights: GuidanceWeights::none(),
            clip_guidance: true,
            adam_outer: false,
            n_samples: 1000,
            label_policy: LabelPolicy::Prior,
            downstream: DownstreamConfig::default(),
        }
    }
}

/// Initializes the score network and the two guidance classifiers for a
/// `width`-dimensional encoded feature space.
pub fn build_state(
    width: usize,
    n_label_classes: usize,
    n_sensitive_classes: usize,
    params: &PipelineParams,
    seed: u64,
) -> Result<TrainState> {
    let mut score_widths = vec![width + TIME_FEATURES];
    score_widths.extend_from_slice(&params.nets.score_hidden);
    score_widths.push(width);
    let score_spec = MlpSpec::new(score_widths, Activation::Relu, OutputHead::Linear)?;

    let clf_spec = |k: usize| -> Result<MlpSpec> {
        let mut widths = vec![width + TIME_FEATURES];
        widths.extend_from_slice(&params.nets.classifier_hidden);
        widths.push(k);
        MlpSpec::new(widths, Activation::Relu, OutputHead::LogSoftmax)
    };

    let score = MlpParams::init(score_spec, &mut crate::rng::stream(seed, "init-score", 0));
    let label = MlpParams::init(clf_spec(n_label_classes)?, &mut crate::rng::stream(seed, "init-label", 0));
    let sens = MlpParams::init(clf_spec(n_sensitive_classes)?, &mut crate::rng::stream(seed, "init-sens", 0));
    Ok(if params.adam_outer {
        TrainState::new_adam(score, label, sens, &params.meta)
    } else {
        TrainState::new(score, label, sens, &params.meta)
    })
}

/// Trains the three models on `ds`.
///
/// With two or more domains this is the meta-training loop. A single-domain
/// dataset (which occurs in leave-one-domain-out folds over two domains)
/// falls back to plain joint training at the γ rates.
pub fn train_models<F>(
    ds: &EncodedDataset,
    part: &DomainPartition,
    params: &PipelineParams,
    seed: u64,
    on_checkpoint: F,
) -> Result<(TrainState, Vec<LossRecord>)>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    let mut state = build_state(ds.width(), ds.n_label_classes, ds.n_sensitive_classes, params, seed)?;
    let history = resume_training(ds, part, params, seed, &mut state, on_checkpoint)?;
    Ok((state, history))
}

/// Continues training an existing state up to `params.fit.iterations`.
pub fn resume_training<F>(
    ds: &EncodedDataset,
    part: &DomainPartition,
    params: &PipelineParams,
    seed: u64,
    state: &mut TrainState,
    mut on_checkpoint: F,
) -> Result<Vec<LossRecord>>
where
    F: FnMut(&TrainState) -> Result<()>,
{
    if part.n_domains() >= 2 {
        return meta::fit(&params.sched, ds, part, &params.meta, &params.fit, state, seed, on_checkpoint);
    }
    // plain joint training
    let mut history = Vec::new();
    while state.iteration < params.fit.iterations {
        let iter = state.iteration;
        let mut rng = crate::rng::stream(seed, "train-iter", iter);
        let take = params.fit.batch_size.min(ds.n());
        let picked = rand::seq::index::sample(&mut rng, ds.n(), take).into_vec();
        let batch = ds.select(&picked);
        let draws_score = params.sched.draw_score_batch(batch.n(), batch.width(), &mut rng);
        let draws_label = params.sched.draw_score_batch(batch.n(), batch.width(), &mut rng);
        let draws_sens = params.sched.draw_score_batch(batch.n(), batch.width(), &mut rng);

        let (ls, gs) = params.sched.score_loss_with(&state.score, batch.x.view(), &draws_score)?;
        state.opt_score.step(&mut state.score, &gs)?;
        let (ly, gy) =
            guidance::classifier_loss_with(&params.sched, &state.label, batch.x.view(), &batch.y, &draws_label)?;
        state.opt_label.step(&mut state.label, &gy)?;
        let (lz, gz) =
            guidance::classifier_loss_with(&params.sched, &state.sens, batch.x.view(), &batch.z, &draws_sens)?;
        state.opt_sens.step(&mut state.sens, &gz)?;

        state.iteration += 1;
        for (model, l) in [
            (meta::ModelKind::Score, ls),
            (meta::ModelKind::Label, ly),
            (meta::ModelKind::Sensitive, lz),
        ] {
            history.push(LossRecord { iteration: iter, model, loss_in: l, loss_out: f64::NAN });
        }
        if params.fit.checkpoint_interval > 0 && state.iteration % params.fit.checkpoint_interval == 0 {
            on_checkpoint(state)?;
        }
    }
    on_checkpoint(state)?;
    Ok(history)
}

/// Draws the per-sample target labels for a generation run.
pub fn request_labels(
    policy: LabelPolicy,
    n: usize,
    source: &EncodedDataset,
    seed: u64,
) -> Result<LabelRequest> {
    let k = source.n_label_classes;
    let mut rng = crate::rng::stream(seed, "labels", 0);
    let labels: Vec<usize> = match policy {
        LabelPolicy::Fixed(c) => {
            if c >= k {
                return Err(Error::Usage(format!("fixed label {c} out of range ({k} classes)")));
            }
            vec![c; n]
        }
        LabelPolicy::Uniform => (0..n).map(|_| rng.gen_range(0..k)).collect(),
        LabelPolicy::Prior => {
            let mut counts = vec![0usize; k];
            for &y in &source.y {
                counts[y] += 1;
            }
            let total = source.y.len() as f64;
            let cdf: Vec<f64> = counts
                .iter()
                .scan(0.0, |acc, &c| {
                    *acc += c as f64 / total;
                    Some(*acc)
                })
                .collect();
            (0..n)
                .map(|_| {
                    let u: f64 = rng.gen();
                    cdf.iter().position(|&c| u < c).unwrap_or(k - 1)
                })
                .collect()
        }
    };
    LabelRequest::new(labels, k)
}

/// Generates `n_samples` rows in encoded space with the configured guidance.
pub fn synthesize(
    state: &TrainState,
    source: &EncodedDataset,
    params: &PipelineParams,
    seed: u64,
) -> Result<(Array2<f32>, Vec<usize>)> {
    let req = request_labels(params.label_policy, params.n_samples, source, seed)?;
    let x = guidance::generate(
        &state.score,
        &state.label,
        &state.sens,
        &params.sched,
        &req,
        &params.weights,
        params.clip_guidance,
        seed,
    )?;
    Ok((x, req.labels))
}

/// One leave-one-domain-out fold result.
#[derive(Debug, Clone, Copy)]
pub struct FoldResult {
    pub candidate: usize,
    pub domain: usize,
    pub acc: f64,
}

/// Full selection report.
#[derive(Debug, Clone)]
pub struct LodoReport {
    pub folds: Vec<FoldResult>,
    /// Mean fold accuracy per candidate.
    pub mean_acc: Vec<f64>,
    pub winner: usize,
}

fn dataset_without_domain(ds: &EncodedDataset, part: &DomainPartition, dom: usize) -> EncodedDataset {
    let rows: Vec<usize> = part
        .groups
        .iter()
        .filter(|(&d, _)| d != dom)
        .flat_map(|(_, rows)| rows.iter().copied())
        .collect();
    ds.select(&rows)
}

/// Trains one configuration end to end and reports downstream accuracy on
/// the held-out slice.
fn run_fold(
    train_ds: &EncodedDataset,
    eval_ds: &EncodedDataset,
    params: &PipelineParams,
    seed: u64,
) -> Result<f64> {
    let part = split_domains(train_ds)?;
    let (state, _) = train_models(train_ds, &part, params, seed, |_| Ok(()))?;
    let (syn_x, syn_y) = synthesize(&state, train_ds, params, seed)?;
    let net = fairness::train_downstream(
        syn_x.view(),
        &syn_y,
        train_ds.n_label_classes,
        &params.downstream,
        seed,
    )?;
    let y_hat = fairness::predict(&net, eval_ds.x.view())?;
    let correct = y_hat.iter().zip(&eval_ds.y).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / eval_ds.n().max(1) as f64)
}

/// Leave-one-domain-out model selection.
///
/// Per candidate, every domain is reserved once (`budget` iterations per
/// fold); the candidate with the highest mean reserved-domain accuracy wins,
/// ties broken by lowest index. The winner is then retrained on all domains
/// at its full iteration count and returned alongside the report.
pub fn leave_one_domain_out(
    ds: &EncodedDataset,
    part: &DomainPartition,
    candidates: &[PipelineParams],
    budget: u64,
    seed: u64,
) -> Result<(LodoReport, TrainState, PipelineParams)> {
    if part.n_domains() < 2 {
        return Err(Error::Config("leave-one-domain-out requires >= 2 domains".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Usage("need at least one candidate configuration".into()));
    }

    let mut folds = Vec::new();
    let mut mean_acc = Vec::with_capacity(candidates.len());
    for (ci, cand) in candidates.iter().enumerate() {
        let mut fold_params = cand.clone();
        fold_params.fit.iterations = budget;
        fold_params.fit.checkpoint_interval = 0;
        let mut sum = 0.0;
        for (&dom, rows) in &part.groups {
            let train_ds = dataset_without_domain(ds, part, dom);
            let eval_ds = ds.select(rows);
            let fold_seed = seed ^ ((ci as u64) << 32) ^ dom as u64;
            let acc = run_fold(&train_ds, &eval_ds, &fold_params, fold_seed)?;
            folds.push(FoldResult { candidate: ci, domain: dom, acc });
            sum += acc;
        }
        mean_acc.push(sum / part.n_domains() as f64);
    }

    let winner = mean_acc
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .unwrap();

    let (state, _) = train_models(ds, part, &candidates[winner], seed, |_| Ok(()))?;
    Ok((LodoReport { folds, mean_acc, winner }, state, candidates[winner].clone()))
}
