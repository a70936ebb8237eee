//! Experiment configuration: a flat TOML file with dotted keys
//! (e.g. `schedule.beta_max = 20.0`). Command-line flags override
//! individual values after loading.

use std::path::{Path, PathBuf};

use fairdiff_core::diffusion::NoiseSchedule;
use fairdiff_core::fairness::DownstreamConfig;
use fairdiff_core::guidance::GuidanceWeights;
use fairdiff_core::meta::{FitConfig, MetaHyperparams, MetaMode};
use fairdiff_core::pipeline::{LabelPolicy, NetworkSizes, PipelineParams};
use fairdiff_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Input data CSV (with header row).
    pub data: PathBuf,
    /// Schema TOML describing the columns.
    pub schema: PathBuf,
    /// Directory for all artifacts (cache, checkpoints, reports).
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Thread budget hint; the current implementation runs sequentially.
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default)]
    pub schedule: ScheduleCfg,
    #[serde(default)]
    pub network: NetworkCfg,
    #[serde(default)]
    pub meta: MetaCfg,
    #[serde(default)]
    pub training: TrainingCfg,
    #[serde(default)]
    pub guidance: GuidanceCfg,
    #[serde(default)]
    pub sampling: SamplingCfg,
    #[serde(default)]
    pub evaluation: EvalCfg,
    #[serde(default)]
    pub lodo: LodoCfg,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleCfg {
    pub beta_min: f64,
    pub beta_max: f64,
    pub n_steps: usize,
    pub t_eps: f64,
}

impl Default for ScheduleCfg {
    fn default() -> Self {
        let d = NoiseSchedule::default();
        Self { beta_min: d.beta_min, beta_max: d.beta_max, n_steps: d.n_steps, t_eps: d.t_eps }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkCfg {
    pub score_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
}

impl Default for NetworkCfg {
    fn default() -> Self {
        let d = NetworkSizes::default();
        Self { score_hidden: d.score_hidden, classifier_hidden: d.classifier_hidden }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaCfg {
    pub alpha_score: f32,
    pub alpha_y: f32,
    pub alpha_z: f32,
    pub beta_score: f32,
    pub beta_y: f32,
    pub beta_z: f32,
    pub gamma_score: f32,
    pub gamma_y: f32,
    pub gamma_z: f32,
    /// `"first-order"` or `"exact"`.
    pub mode: String,
    /// Finite-difference step of the exact mode's curvature correction.
    pub fd_step: f32,
}

impl Default for MetaCfg {
    fn default() -> Self {
        let d = MetaHyperparams::default();
        Self {
            alpha_score: d.alpha_score,
            alpha_y: d.alpha_y,
            alpha_z: d.alpha_z,
            beta_score: d.beta_score,
            beta_y: d.beta_y,
            beta_z: d.beta_z,
            gamma_score: d.gamma_score,
            gamma_y: d.gamma_y,
            gamma_z: d.gamma_z,
            mode: "first-order".into(),
            fd_step: 0.01,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingCfg {
    pub iterations: u64,
    pub batch_size: usize,
    /// 0 disables periodic checkpoints (one is always written at the end).
    pub checkpoint_interval: u64,
    /// Adam outer optimizers at the γ rates instead of plain SGD.
    pub adam: bool,
}

impl Default for TrainingCfg {
    fn default() -> Self {
        Self { iterations: 3000, batch_size: 256, checkpoint_interval: 500, adam: true }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceCfg {
    pub lambda_y: f32,
    pub lambda_z: f32,
    pub clip: bool,
}

impl Default for GuidanceCfg {
    fn default() -> Self {
        Self { lambda_y: 2.0, lambda_z: 2.0, clip: true }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingCfg {
    pub num_samples: usize,
    /// `"prior"`, `"uniform"` or `"fixed:<class index>"`.
    pub label_policy: String,
}

impl Default for SamplingCfg {
    fn default() -> Self {
        Self { num_samples: 1000, label_policy: "prior".into() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCfg {
    pub hidden_width: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for EvalCfg {
    fn default() -> Self {
        let d = DownstreamConfig::default();
        Self {
            hidden_width: d.hidden_width,
            max_epochs: d.max_epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            val_fraction: d.val_fraction,
            patience: d.patience,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LodoCfg {
    /// Training iterations per leave-one-domain-out fold.
    pub budget: u64,
}

impl Default for LodoCfg {
    fn default() -> Self {
        Self { budget: 500 }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config '{}': {e}", path.display())))
    }

    pub fn meta_mode(&self) -> Result<MetaMode> {
        match self.meta.mode.as_str() {
            "first-order" => Ok(MetaMode::FirstOrder),
            "exact" => Ok(MetaMode::Exact { h: self.meta.fd_step }),
            other => Err(Error::Config(format!(
                "meta.mode must be 'first-order' or 'exact', got '{other}'"
            ))),
        }
    }

    pub fn downstream(&self) -> DownstreamConfig {
        DownstreamConfig {
            hidden_width: self.evaluation.hidden_width,
            max_epochs: self.evaluation.max_epochs,
            batch_size: self.evaluation.batch_size,
            learning_rate: self.evaluation.learning_rate,
            val_fraction: self.evaluation.val_fraction,
            patience: self.evaluation.patience,
        }
    }

    /// Assembles the full pipeline parameter set from the config.
    pub fn params(&self) -> Result<PipelineParams> {
        let meta = MetaHyperparams {
            alpha_score: self.meta.alpha_score,
            alpha_y: self.meta.alpha_y,
            alpha_z: self.meta.alpha_z,
            beta_score: self.meta.beta_score,
            beta_y: self.meta.beta_y,
            beta_z: self.meta.beta_z,
            gamma_score: self.meta.gamma_score,
            gamma_y: self.meta.gamma_y,
            gamma_z: self.meta.gamma_z,
        };
        meta.validate()?;
        Ok(PipelineParams {
            sched: NoiseSchedule {
                beta_min: self.schedule.beta_min,
                beta_max: self.schedule.beta_max,
                n_steps: self.schedule.n_steps,
                t_eps: self.schedule.t_eps,
            },
            nets: NetworkSizes {
                score_hidden: self.network.score_hidden.clone(),
                classifier_hidden: self.network.classifier_hidden.clone(),
            },
            meta,
            fit: FitConfig {
                iterations: self.training.iterations,
                batch_size: self.training.batch_size,
                mode: self.meta_mode()?,
                checkpoint_interval: self.training.checkpoint_interval,
            },
            weights: GuidanceWeights::new(self.guidance.lambda_y, self.guidance.lambda_z)?,
            clip_guidance: self.guidance.clip,
            adam_outer: self.training.adam,
            n_samples: self.sampling.num_samples,
            label_policy: parse_label_policy(&self.sampling.label_policy)?,
            downstream: self.downstream(),
        })
    }
}

/// Parses `"prior"`, `"uniform"` or `"fixed:<class index>"`.
pub fn parse_label_policy(s: &str) -> Result<LabelPolicy> {
    match s {
        "prior" => Ok(LabelPolicy::Prior),
        "uniform" => Ok(LabelPolicy::Uniform),
        other => match other.strip_prefix("fixed:") {
            Some(idx) => idx
                .parse::<usize>()
                .map(LabelPolicy::Fixed)
                .map_err(|_| Error::Usage(format!("bad fixed label class '{idx}'"))),
            None => Err(Error::Usage(format!(
                "label policy must be 'prior', 'uniform' or 'fixed:<class>', got '{other}'"
            ))),
        },
    }
}
