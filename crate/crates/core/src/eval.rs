//! Evaluation of uncertainty estimates: hyperparameter-sweep consistency,
//! quantile-binned qualitative calibration, and quantitative NLL scoring.
//!
//! Consistency asks that refitting under a nearby hyperparameter setting
//! barely moves each individual's uncertainty estimate; calibration asks
//! that predicted sigma matches the spread actually observed in held-out
//! residuals.

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::estimators::{sigma_to_prob, Estimator, Prediction, ProbSource};
use crate::gbt::{PipelineConfig, SweepParam};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Probabilities are clipped to `[P_CLIP, 1 - P_CLIP]` before taking logs.
pub const P_CLIP: f64 = 1e-9;

/// Sigma floor for the normal NLL metric.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Spread of per-individual uncertainty estimates across a hyperparameter
/// sweep, plus accuracy per setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub estimator: String,
    pub hyperparam: String,
    pub grid: Vec<f64>,
    /// Largest deviation of any grid value from the base setting; recorded
    /// so reports state how far the "similar pipelines" were allowed to
    /// drift.
    pub tau: f64,
    /// Population std of each test individual's sigma across settings.
    pub per_individual_std: Vec<f64>,
    pub per_individual_min: Vec<f64>,
    pub per_individual_max: Vec<f64>,
    pub max_std: f64,
    /// Misclassification rate (binary) or RMSE (regression) per grid value.
    pub per_setting_error: Vec<f64>,
}

/// Runs the estimator once per grid value with identical data and seed and
/// measures how much each individual's uncertainty estimate moves.
pub fn consistency(
    train: &Dataset,
    test: &Dataset,
    estimator: &Estimator,
    base_config: &PipelineConfig,
    param: SweepParam,
    grid: &[f64],
) -> Result<ConsistencyReport> {
    if grid.is_empty() {
        return Err(Error::config("grid", "consistency grid must be nonempty"));
    }
    let per_setting: Vec<Vec<Prediction>> = grid
        .par_iter()
        .map(|&v| {
            let config = param.apply(base_config, v)?;
            estimator.run(train, test, &config)
        })
        .collect::<Result<_>>()?;

    let per_setting_error: Vec<f64> = per_setting
        .iter()
        .map(|preds| prediction_error(preds, test.outcome(), test.task()))
        .collect::<Result<_>>()?;

    let n = test.n_rows();
    let s = per_setting.len() as f64;
    let mut per_individual_std = Vec::with_capacity(n);
    let mut per_individual_min = Vec::with_capacity(n);
    let mut per_individual_max = Vec::with_capacity(n);
    for i in 0..n {
        let sigmas: Vec<f64> = per_setting.iter().map(|p| p[i].sigma).collect();
        let mean = sigmas.iter().sum::<f64>() / s;
        let var = sigmas.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s;
        per_individual_std.push(var.sqrt());
        per_individual_min.push(sigmas.iter().copied().fold(f64::INFINITY, f64::min));
        per_individual_max.push(sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let max_std = per_individual_std.iter().copied().fold(0.0, f64::max);
    let base = param.base_value(base_config);
    let tau = grid.iter().map(|v| (v - base).abs()).fold(0.0, f64::max);

    Ok(ConsistencyReport {
        estimator: estimator.name().to_string(),
        hyperparam: param.name().to_string(),
        grid: grid.to_vec(),
        tau,
        per_individual_std,
        per_individual_min,
        per_individual_max,
        max_std,
        per_setting_error,
    })
}

fn prediction_error(preds: &[Prediction], outcomes: &[f64], task: Task) -> Result<f64> {
    if preds.len() != outcomes.len() {
        return Err(Error::domain("prediction/outcome length mismatch"));
    }
    match task {
        Task::Binary => {
            let mut wrong = 0usize;
            for (p, &y) in preds.iter().zip(outcomes) {
                let label = p
                    .label
                    .ok_or_else(|| Error::domain("binary error rate requires labels"))?;
                if (label == 1) != (y == 1.0) {
                    wrong += 1;
                }
            }
            Ok(wrong as f64 / preds.len() as f64)
        }
        Task::Regression => {
            let mse = preds
                .iter()
                .zip(outcomes)
                .map(|(p, &y)| (p.mu - y).powi(2))
                .sum::<f64>()
                / preds.len() as f64;
            Ok(mse.sqrt())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub mean_sigma: f64,
    pub empirical_std: f64,
    pub count: usize,
}

/// Equal-count bins of the test set ordered by predicted sigma; within each
/// bin, the empirical standard deviation of the residuals `y - mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBins {
    pub groups: usize,
    pub bins: Vec<CalibrationBin>,
}

pub fn calibration_bins(
    predictions: &[Prediction],
    outcomes: &[f64],
    groups: usize,
) -> Result<CalibrationBins> {
    let n = predictions.len();
    if n != outcomes.len() {
        return Err(Error::domain("prediction/outcome length mismatch"));
    }
    if groups == 0 || groups > n {
        return Err(Error::domain(format!(
            "group count {groups} must lie in [1, n={n}]"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        predictions[a]
            .sigma
            .total_cmp(&predictions[b].sigma)
            .then(a.cmp(&b))
    });

    // n = q*groups + r: the first r bins take one extra observation.
    let q = n / groups;
    let r = n % groups;
    let mut bins = Vec::with_capacity(groups);
    let mut at = 0usize;
    for b in 0..groups {
        let size = q + usize::from(b < r);
        let members = &order[at..at + size];
        at += size;
        let mean_sigma = members.iter().map(|&i| predictions[i].sigma).sum::<f64>() / size as f64;
        let residuals: Vec<f64> = members
            .iter()
            .map(|&i| outcomes[i] - predictions[i].mu)
            .collect();
        let mean_res = residuals.iter().sum::<f64>() / size as f64;
        let var = residuals.iter().map(|x| (x - mean_res).powi(2)).sum::<f64>() / size as f64;
        bins.push(CalibrationBin {
            mean_sigma,
            empirical_std: var.sqrt(),
            count: size,
        });
    }
    Ok(CalibrationBins { groups, bins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryNllReport {
    pub mean_nll: f64,
    /// Number of predictions whose sigma exceeded 1/2 and was clamped during
    /// the probability inversion.
    pub clamped_sigma_count: usize,
}

/// Mean Bernoulli negative log-likelihood. Probabilities come either
/// directly from `mu` or from the documented sigma-to-probability inversion,
/// then are clipped away from {0,1}.
pub fn nll_binary(
    predictions: &[Prediction],
    outcomes: &[f64],
    source: ProbSource,
) -> Result<BinaryNllReport> {
    if predictions.is_empty() || predictions.len() != outcomes.len() {
        return Err(Error::domain("nll_binary requires matching nonempty inputs"));
    }
    let mut total = 0.0;
    let mut clamped = 0usize;
    for (pred, &y) in predictions.iter().zip(outcomes) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::domain(format!("binary outcome must be 0 or 1, got {y}")));
        }
        let p = match source {
            ProbSource::Mu => pred.mu,
            ProbSource::SigmaLabel => {
                let label = pred
                    .label
                    .ok_or_else(|| Error::domain("sigma inversion requires a predicted label"))?;
                if pred.sigma > 0.5 {
                    clamped += 1;
                }
                sigma_to_prob(pred.sigma, label)
            }
        };
        let p = p.clamp(P_CLIP, 1.0 - P_CLIP);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(BinaryNllReport {
        mean_nll: total / predictions.len() as f64,
        clamped_sigma_count: clamped,
    })
}

/// Mean normal negative log-likelihood `ln sigma + ((y - mu)/sigma)^2 / 2`,
/// optionally with the `ln(2 pi)/2` constant added.
pub fn nll_normal(
    predictions: &[Prediction],
    outcomes: &[f64],
    include_constant: bool,
) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != outcomes.len() {
        return Err(Error::domain("nll_normal requires matching nonempty inputs"));
    }
    let constant = if include_constant {
        0.5 * (2.0 * std::f64::consts::PI).ln()
    } else {
        0.0
    };
    let total: f64 = predictions
        .iter()
        .zip(outcomes)
        .map(|(pred, &y)| {
            let sigma = pred.sigma.max(SIGMA_FLOOR);
            sigma.ln() + 0.5 * ((y - pred.mu) / sigma).powi(2) + constant
        })
        .sum();
    Ok(total / predictions.len() as f64)
}
