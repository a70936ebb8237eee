//! Downstream evaluation: accuracy and group-fairness ratios.
//!
//! Both fairness metrics are min-ratios in [0, 1]:
//! - demographic parity ratio: positive-prediction rates across the two
//!   sensitive groups;
//! - equalized-opportunity ratio: true-positive rates, i.e. the same ratio
//!   restricted to ground-truth-positive rows.
//!
//! Edge rules at 0/0: both group rates zero → ratio 1.0 (flagged), exactly
//! one zero → 0.0. "Positive" is class index 1 throughout.

use alloc::string::String;
use alloc::{format, vec::Vec};
use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::{Activation, MlpParams, MlpSpec, OptimizerState, OutputHead};
use crate::tabular::EncodedDataset;

/// Predictions, ground truth and sensitive values over one test set.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub y_hat: Vec<usize>,
    pub y: Vec<usize>,
    pub z: Vec<usize>,
}

impl PredictionSet {
    pub fn new(y_hat: Vec<usize>, y: Vec<usize>, z: Vec<usize>) -> Result<Self> {
        if y_hat.len() != y.len() || y.len() != z.len() {
            return Err(Error::Usage("prediction set vectors must have equal length".into()));
        }
        if z.iter().any(|&g| g > 1) {
            return Err(Error::Usage("fairness ratios are defined for binary sensitive groups".into()));
        }
        Ok(Self { y_hat, y, z })
    }
}

fn min_ratio(rate0: f64, rate1: f64) -> f64 {
    if rate0 == 0.0 && rate1 == 0.0 {
        return 1.0;
    }
    if rate0 == 0.0 || rate1 == 0.0 {
        return 0.0;
    }
    (rate0 / rate1).min(rate1 / rate0)
}

/// Demographic-parity ratio `min(r, 1/r)` of the positive-prediction rates
/// of the two sensitive groups.
pub fn r_dp(pred: &PredictionSet) -> Result<f64> {
    let mut pos = [0usize; 2];
    let mut total = [0usize; 2];
    for (&yh, &g) in pred.y_hat.iter().zip(&pred.z) {
        total[g] += 1;
        if yh == 1 {
            pos[g] += 1;
        }
    }
    for (g, &n) in total.iter().enumerate() {
        if n == 0 {
            return Err(Error::Data(format!("sensitive group {g} absent from prediction set")));
        }
    }
    Ok(min_ratio(pos[0] as f64 / total[0] as f64, pos[1] as f64 / total[1] as f64))
}

/// Equalized-opportunity ratio: the same min-ratio over true-positive rates
/// (rows with ground-truth label 1 only).
pub fn r_eop(pred: &PredictionSet) -> Result<f64> {
    let mut tp = [0usize; 2];
    let mut positives = [0usize; 2];
    for ((&yh, &y), &g) in pred.y_hat.iter().zip(&pred.y).zip(&pred.z) {
        if y == 1 {
            positives[g] += 1;
            if yh == 1 {
                tp[g] += 1;
            }
        }
    }
    for (g, &n) in positives.iter().enumerate() {
        if n == 0 {
            return Err(Error::Data(format!("no ground-truth positives in sensitive group {g}")));
        }
    }
    Ok(min_ratio(tp[0] as f64 / positives[0] as f64, tp[1] as f64 / positives[1] as f64))
}

/// Downstream classifier training configuration.
#[derive(Debug, Clone)]
pub struct DownstreamConfig {
    pub hidden_width: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Fraction of the synthetic data held out for early stopping.
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            max_epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            val_fraction: 0.1,
            patience: 20,
        }
    }
}

fn ce_loss_and_grads(net: &MlpParams, x: ArrayView2<f32>, y: &[usize]) -> Result<(f64, MlpParams)> {
    let logp = net.forward(x)?;
    let n = x.nrows();
    let k = net.spec.output_dim();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0f64;
    let mut upstream = Array2::zeros((n, k));
    for (i, &yi) in y.iter().enumerate() {
        loss -= (logp[[i, yi]] as f64).max(libm::log(crate::guidance::PROB_FLOOR)) * inv_n;
        upstream[[i, yi]] = -(inv_n as f32);
    }
    let bundle = net.backward(x, upstream.view(), false)?;
    Ok((loss, bundle.param_grads))
}

fn ce_loss_only(net: &MlpParams, x: ArrayView2<f32>, y: &[usize]) -> Result<f64> {
    let logp = net.forward(x)?;
    let inv_n = 1.0 / x.nrows() as f64;
    let mut loss = 0.0f64;
    for (i, &yi) in y.iter().enumerate() {
        loss -= (logp[[i, yi]] as f64).max(libm::log(crate::guidance::PROB_FLOOR)) * inv_n;
    }
    Ok(loss)
}

/// Trains the fixed downstream architecture (one hidden layer, relu,
/// log-softmax head) on clean feature rows with adam, early stopping on a
/// validation split. Deterministic given `seed`.
pub fn train_downstream(
    x: ArrayView2<f32>,
    y: &[usize],
    n_classes: usize,
    cfg: &DownstreamConfig,
    seed: u64,
) -> Result<MlpParams> {
    let n = x.nrows();
    if n != y.len() {
        return Err(Error::Usage("feature/label row counts differ".into()));
    }
    let mut seen = alloc::vec![false; n_classes];
    for &yi in y {
        if yi >= n_classes {
            return Err(Error::Usage(format!("label {yi} out of range ({n_classes} classes)")));
        }
        seen[yi] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Data("downstream training needs at least 2 label classes present".into()));
    }

    let spec = MlpSpec::new(
        alloc::vec![x.ncols(), cfg.hidden_width, n_classes],
        Activation::Relu,
        OutputHead::LogSoftmax,
    )?;
    let mut rng = crate::rng::stream(seed, "downstream", 0);
    let mut net = MlpParams::init(spec, &mut rng);
    let mut opt = OptimizerState::adam(cfg.learning_rate);

    // validation split
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * cfg.val_fraction) as usize).min(n.saturating_sub(2));
    let (val_idx, train_idx) = order.split_at(n_val);
    let gather = |idx: &[usize]| -> (Array2<f32>, Vec<usize>) {
        let xs = x.select(Axis(0), idx);
        let ys = idx.iter().map(|&i| y[i]).collect();
        (xs, ys)
    };
    let (x_train, y_train) = gather(train_idx);
    let (x_val, y_val) = gather(val_idx);

    let mut best = net.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    let n_train = x_train.nrows();
    let mut idx: Vec<usize> = (0..n_train).collect();
    for _epoch in 0..cfg.max_epochs {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let xb = x_train.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y_train[i]).collect();
            let (_, grads) = ce_loss_and_grads(&net, xb.view(), &yb)?;
            opt.step(&mut net, &grads)?;
        }
        if !x_val.is_empty() {
            let val = ce_loss_only(&net, x_val.view(), &y_val)?;
            if val < best_val - 1e-6 {
                best_val = val;
                best = net.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        } else {
            best = net.clone();
        }
    }
    Ok(if x_val.is_empty() { net } else { best })
}

/// Argmax predictions of a trained classifier.
pub fn predict(net: &MlpParams, x: ArrayView2<f32>) -> Result<Vec<usize>> {
    let out = net.forward(x)?;
    Ok(out
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// One evaluated domain: accuracy plus the two fairness ratios.
/// A `None` ratio means the metric was degenerate on this domain (reported
/// in `warnings`, excluded from averages).
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub acc: f64,
    pub r_dp: Option<f64>,
    pub r_eop: Option<f64>,
    pub warnings: Vec<String>,
}

/// Evaluates a downstream classifier on a real target-domain slice, using
/// the target's real sensitive values.
pub fn evaluate_target(net: &MlpParams, target: &EncodedDataset) -> Result<ReportRow> {
    if target.n() == 0 {
        return Err(Error::Usage("empty target dataset".into()));
    }
    let y_hat = predict(net, target.x.view())?;
    let correct = y_hat.iter().zip(&target.y).filter(|(a, b)| a == b).count();
    let acc = correct as f64 / target.n() as f64;

    let pred = PredictionSet::new(y_hat, target.y.clone(), target.z.clone())?;
    let mut warnings = Vec::new();
    let dp = match r_dp(&pred) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("R_DP unavailable: {e}"));
            None
        }
    };
    let eop = match r_eop(&pred) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("R_EOp unavailable: {e}"));
            None
        }
    };
    Ok(ReportRow { acc, r_dp: dp, r_eop: eop, warnings })
}

/// Per-domain rows plus the unweighted average row.
#[derive(Debug, Clone)]
pub struct FairnessReport {
    /// (domain index, domain name, row)
    pub rows: Vec<(usize, String, ReportRow)>,
}

impl FairnessReport {
    /// Unweighted mean over domains; degenerate metrics are skipped.
    pub fn average(&self) -> ReportRow {
        let n = self.rows.len().max(1) as f64;
        let acc = self.rows.iter().map(|(_, _, r)| r.acc).sum::<f64>() / n;
        let mean_of = |vals: Vec<f64>| {
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        let dp = mean_of(self.rows.iter().filter_map(|(_, _, r)| r.r_dp).collect());
        let eop = mean_of(self.rows.iter().filter_map(|(_, _, r)| r.r_eop).collect());
        let warnings = self
            .rows
            .iter()
            .flat_map(|(_, name, r)| r.warnings.iter().map(move |w| format!("{name}: {w}")))
            .collect();
        ReportRow { acc, r_dp: dp, r_eop: eop, warnings }
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into());
        let mut out = String::from("domain,acc,r_dp,r_eop\n");
        for (_, name, r) in &self.rows {
            out.push_str(&format!("{name},{:.4},{},{}\n", r.acc, fmt(r.r_dp), fmt(r.r_eop)));
        }
        let avg = self.average();
        out.push_str(&format!("Avg,{:.4},{},{}\n", avg.acc, fmt(avg.r_dp), fmt(avg.r_eop)));
        out
    }

    /// Aligned text table with per-domain ACC / R_DP / R_EOp columns plus Avg.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "NA".into());
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>8} {:>8} {:>8}\n", "Domain", "ACC", "R_DP", "R_EOp"));
        for (_, name, r) in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>8.2} {:>8} {:>8}\n",
                name,
                100.0 * r.acc,
                fmt(r.r_dp),
                fmt(r.r_eop)
            ));
        }
        let avg = self.average();
        out.push_str(&format!(
            "{:<24} {:>8.2} {:>8} {:>8}\n",
            "Avg",
            100.0 * avg.acc,
            fmt(avg.r_dp),
            fmt(avg.r_eop)
        ));
        out
    }
}
