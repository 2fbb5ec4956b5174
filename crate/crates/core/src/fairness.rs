//! Group fairness metrics, the abstention harness with rate selection,
//! uncertainty-aware statistical parity via the Kolmogorov-Smirnov distance
//! between per-group mixture CDFs, and Wasserstein feature-shift analysis of
//! the abstained population.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimators::Prediction;
use serde::{Deserialize, Serialize};

/// A fairness metric value that may be undefined on degenerate data (empty
/// conditioning cell, zero denominator); the reason travels with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: Option<f64>,
    pub null_reason: Option<String>,
}

impl Metric {
    fn value(v: f64) -> Metric {
        Metric {
            value: Some(v),
            null_reason: None,
        }
    }

    fn null(reason: impl Into<String>) -> Metric {
        Metric {
            value: None,
            null_reason: Some(reason.into()),
        }
    }

    pub fn get(&self) -> Option<f64> {
        self.value
    }
}

/// Predictions joined with binary outcomes and the privileged-group mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedPredictions {
    pub predictions: Vec<Prediction>,
    pub outcomes: Vec<f64>,
    pub privileged: Vec<bool>,
}

impl GroupedPredictions {
    pub fn new(
        predictions: Vec<Prediction>,
        outcomes: Vec<f64>,
        privileged: Vec<bool>,
    ) -> Result<Self> {
        let n = predictions.len();
        if n == 0 || outcomes.len() != n || privileged.len() != n {
            return Err(Error::domain(
                "grouped predictions require matching nonempty vectors",
            ));
        }
        Ok(GroupedPredictions {
            predictions,
            outcomes,
            privileged,
        })
    }

    /// Joins estimator output with the test set's outcomes and groups.
    pub fn from_test_set(predictions: Vec<Prediction>, test: &Dataset) -> Result<Self> {
        GroupedPredictions::new(
            predictions,
            test.outcome().to_vec(),
            test.privileged_mask(),
        )
    }

    fn subset(&self, keep: &[bool]) -> GroupedPredictions {
        let pick = |i: usize| keep[i];
        GroupedPredictions {
            predictions: self
                .predictions
                .iter()
                .enumerate()
                .filter(|(i, _)| pick(*i))
                .map(|(_, p)| *p)
                .collect(),
            outcomes: self
                .outcomes
                .iter()
                .enumerate()
                .filter(|(i, _)| pick(*i))
                .map(|(_, y)| *y)
                .collect(),
            privileged: self
                .privileged
                .iter()
                .enumerate()
                .filter(|(i, _)| pick(*i))
                .map(|(_, a)| *a)
                .collect(),
        }
    }
}

/// The seven-entry fairness record over one prediction set. Gaps are
/// absolute differences between the unprivileged and privileged group;
/// disparate impact is the unprivileged/privileged positive-rate ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub error_rate: f64,
    pub statistical_parity: f64,
    pub equalized_odds: Metric,
    pub equal_opportunity: Metric,
    pub disparate_impact: Metric,
    pub predictive_parity: Metric,
    pub fpr_gap: Metric,
}

#[derive(Default, Clone, Copy)]
struct GroupCounts {
    n: usize,
    pos_pred: usize,
    y1: usize,
    y0: usize,
    tp: usize,
    fp: usize,
}

impl GroupCounts {
    fn positive_rate(&self) -> f64 {
        self.pos_pred as f64 / self.n as f64
    }
    fn tpr(&self) -> Option<f64> {
        (self.y1 > 0).then(|| self.tp as f64 / self.y1 as f64)
    }
    fn fpr(&self) -> Option<f64> {
        (self.y0 > 0).then(|| self.fp as f64 / self.y0 as f64)
    }
    fn precision(&self) -> Option<f64> {
        (self.pos_pred > 0).then(|| self.tp as f64 / self.pos_pred as f64)
    }
}

fn gap(u: Option<f64>, p: Option<f64>, cell: &str) -> Metric {
    match (u, p) {
        (Some(a), Some(b)) => Metric::value((a - b).abs()),
        _ => Metric::null(format!("empty conditioning cell: {cell}")),
    }
}

/// Computes the binary fairness record. Requires labels on every prediction
/// and at least one observation in each group.
pub fn binary_metrics(gp: &GroupedPredictions) -> Result<BinaryMetrics> {
    let mut counts = [GroupCounts::default(), GroupCounts::default()];
    let mut wrong = 0usize;
    for i in 0..gp.predictions.len() {
        let label = gp.predictions[i]
            .label
            .ok_or_else(|| Error::domain("binary metrics require predicted labels"))?;
        let y = gp.outcomes[i];
        if y != 0.0 && y != 1.0 {
            return Err(Error::domain(format!("binary outcome must be 0 or 1, got {y}")));
        }
        let g = &mut counts[usize::from(gp.privileged[i])];
        g.n += 1;
        if label == 1 {
            g.pos_pred += 1;
            if y == 1.0 {
                g.tp += 1;
            } else {
                g.fp += 1;
            }
        }
        if y == 1.0 {
            g.y1 += 1;
        } else {
            g.y0 += 1;
        }
        if (label == 1) != (y == 1.0) {
            wrong += 1;
        }
    }
    let [unpriv, priv_] = counts;
    if unpriv.n == 0 || priv_.n == 0 {
        return Err(Error::domain("both protected groups must be nonempty"));
    }

    let sp = (unpriv.positive_rate() - priv_.positive_rate()).abs();
    let eopp = gap(unpriv.tpr(), priv_.tpr(), "no positive outcomes in a group");
    let fpr = gap(unpriv.fpr(), priv_.fpr(), "no negative outcomes in a group");
    let eodds = match (eopp.get(), fpr.get()) {
        (Some(a), Some(b)) => Metric::value(a.max(b)),
        _ => Metric::null("empty conditioning cell: outcome class missing in a group"),
    };
    let di = if priv_.pos_pred == 0 {
        Metric::null("division by zero: privileged positive-prediction rate is 0")
    } else {
        Metric::value(unpriv.positive_rate() / priv_.positive_rate())
    };
    let pp = gap(
        unpriv.precision(),
        priv_.precision(),
        "no positive predictions in a group",
    );

    Ok(BinaryMetrics {
        error_rate: wrong as f64 / gp.predictions.len() as f64,
        statistical_parity: sp,
        equalized_odds: eodds,
        equal_opportunity: eopp,
        disparate_impact: di,
        predictive_parity: pp,
        fpr_gap: fpr,
    })
}

/// Inclusion mask after abstaining on the `rate` fraction of observations
/// with the highest uncertainty. Exactly `ceil(rate * n)` rows drop; sigma
/// ties resolve by original index.
pub fn abstention_mask(sigmas: &[f64], rate: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(format!(
            "abstention rate must lie in [0,1), got {rate}"
        )));
    }
    let n = sigmas.len();
    let drop = (rate * n as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigmas[b].total_cmp(&sigmas[a]).then(a.cmp(&b)));
    let mut keep = vec![true; n];
    for &i in order.iter().take(drop) {
        keep[i] = false;
    }
    Ok(keep)
}

/// One abstention grid point: the fairness record over the included set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstentionPoint {
    pub abstention_rate: f64,
    pub inclusion_rate: f64,
    pub included_count: usize,
    pub included_pct: f64,
    pub metrics: Option<BinaryMetrics>,
    pub null_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbstentionCurve {
    pub points: Vec<AbstentionPoint>,
}

/// Recomputes the fairness record after dropping the highest-uncertainty
/// fraction, for each abstention rate in the grid.
pub fn abstention_curve(gp: &GroupedPredictions, rates: &[f64]) -> Result<AbstentionCurve> {
    let sigmas: Vec<f64> = gp.predictions.iter().map(|p| p.sigma).collect();
    let n = gp.predictions.len();
    let mut points = Vec::with_capacity(rates.len());
    for &rate in rates {
        let keep = abstention_mask(&sigmas, rate)?;
        let included_count = keep.iter().filter(|&&k| k).count();
        let included = gp.subset(&keep);
        let (metrics, null_reason) = if included.predictions.is_empty() {
            (None, Some("all observations abstained".to_string()))
        } else {
            match binary_metrics(&included) {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };
        points.push(AbstentionPoint {
            abstention_rate: rate,
            inclusion_rate: 1.0 - rate,
            included_count,
            included_pct: 100.0 * included_count as f64 / n as f64,
            metrics,
            null_reason,
        });
    }
    Ok(AbstentionCurve { points })
}

/// The abstention grid used throughout: inclusion from 75% to 100% in 1%
/// steps.
pub fn default_abstention_rates() -> Vec<f64> {
    (0..=25).map(|i| i as f64 / 100.0).collect()
}

/// Picks the inclusion rate minimizing the normalized sum of error rate,
/// statistical parity, and equalized odds over the [0.75, 1.00] inclusion
/// window. Constant metrics normalize to zero; ties resolve toward the
/// highest inclusion.
pub fn select_abstention_rate(curve: &AbstentionCurve) -> Result<f64> {
    let mut rows: Vec<(f64, f64, f64, f64)> = Vec::new(); // (inclusion, error, sp, eodds)
    for p in &curve.points {
        if p.inclusion_rate < 0.75 - 1e-9 {
            continue;
        }
        let m = p.metrics.as_ref().ok_or_else(|| {
            Error::domain(format!(
                "metrics are null at inclusion {:.2}: {}",
                p.inclusion_rate,
                p.null_reason.as_deref().unwrap_or("unknown")
            ))
        })?;
        let eodds = m.equalized_odds.get().ok_or_else(|| {
            Error::domain(format!(
                "equalized odds is null at inclusion {:.2}",
                p.inclusion_rate
            ))
        })?;
        rows.push((p.inclusion_rate, m.error_rate, m.statistical_parity, eodds));
    }
    if rows.is_empty() {
        return Err(Error::domain("curve has no points with inclusion >= 0.75"));
    }
    if !rows.iter().any(|r| r.0 >= 1.0 - 1e-9) {
        return Err(Error::domain("curve must include the 100% inclusion point"));
    }
    if !rows.iter().any(|r| r.0 <= 0.75 + 1e-9) {
        return Err(Error::domain("curve must reach down to 75% inclusion"));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let norm = |vals: Vec<f64>| -> Vec<f64> {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            vals.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; vals.len()]
        }
    };
    let err = norm(rows.iter().map(|r| r.1).collect());
    let sp = norm(rows.iter().map(|r| r.2).collect());
    let eo = norm(rows.iter().map(|r| r.3).collect());

    let mut best_idx = 0usize;
    let mut best_sum = f64::INFINITY;
    for i in 0..rows.len() {
        let sum = err[i] + sp[i] + eo[i];
        // ascending inclusion order: `<=` sends exact ties to the highest
        if sum <= best_sum {
            best_sum = sum;
            best_idx = i;
        }
    }
    Ok(rows[best_idx].0)
}

/// A uniform mixture over normal components; zero-sigma components
/// contribute right-continuous steps. This is the predictive CDF of the
/// randomized decision function used by uncertainty-aware parity.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureCdf {
    components: Vec<(f64, f64)>,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

impl MixtureCdf {
    pub fn new(components: Vec<(f64, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::domain("mixture requires at least one component"));
        }
        for &(mu, sigma) in &components {
            if !mu.is_finite() || !(sigma >= 0.0) || !sigma.is_finite() {
                return Err(Error::domain(format!(
                    "bad mixture component ({mu}, {sigma})"
                )));
            }
        }
        Ok(MixtureCdf { components })
    }

    /// One component per prediction, `N(mu, sigma^2)`.
    pub fn from_predictions(predictions: &[Prediction]) -> Result<Self> {
        MixtureCdf::new(predictions.iter().map(|p| (p.mu, p.sigma)).collect())
    }

    /// Degenerate mixture of point masses (sigma = 0 everywhere): the
    /// empirical CDF of `values`.
    pub fn point_masses(values: &[f64]) -> Result<Self> {
        MixtureCdf::new(values.iter().map(|&v| (v, 0.0)).collect())
    }

    pub fn components(&self) -> &[(f64, f64)] {
        &self.components
    }

    pub fn eval(&self, y: f64) -> f64 {
        self.eval_inner(y, false)
    }

    /// Left limit `F(y-)`: step components count only strictly below `y`.
    pub fn eval_left(&self, y: f64) -> f64 {
        self.eval_inner(y, true)
    }

    fn eval_inner(&self, y: f64, left: bool) -> f64 {
        let total: f64 = self
            .components
            .iter()
            .map(|&(mu, sigma)| {
                if sigma == 0.0 {
                    let hit = if left { y > mu } else { y >= mu };
                    f64::from(u8::from(hit))
                } else {
                    normal_cdf((y - mu) / sigma)
                }
            })
            .sum();
        total / self.components.len() as f64
    }
}

const KS_REFINE_TOL: f64 = 1e-4;

/// Kolmogorov-Smirnov distance between two mixture CDFs: the sup over
/// outputs of `|F_A - F_B|`. Located on the refinement grid of all component
/// means plus `mu +- j sigma / 2` for `j = 1..8`, then sharpened by
/// golden-section search around the grid argmax. With all sigmas zero this
/// is exactly the classical two-sample KS statistic.
pub fn ks_uasp(a: &MixtureCdf, b: &MixtureCdf) -> f64 {
    let mut grid = Vec::new();
    for mixture in [a, b] {
        for &(mu, sigma) in mixture.components() {
            grid.push(mu);
            if sigma > 0.0 {
                for j in 1..=8 {
                    let step = j as f64 * sigma / 2.0;
                    grid.push(mu - step);
                    grid.push(mu + step);
                }
            }
        }
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let diff = |y: f64| (a.eval(y) - b.eval(y)).abs();
    let diff_left = |y: f64| (a.eval_left(y) - b.eval_left(y)).abs();

    let mut best = 0.0f64;
    let mut best_idx = 0usize;
    for (i, &y) in grid.iter().enumerate() {
        let d = diff(y).max(diff_left(y));
        if d > best {
            best = d;
            best_idx = i;
        }
    }

    // Local refinement between the argmax's grid neighbors.
    let lo = if best_idx > 0 { grid[best_idx - 1] } else { grid[best_idx] };
    let hi = if best_idx + 1 < grid.len() {
        grid[best_idx + 1]
    } else {
        grid[best_idx]
    };
    best.max(golden_section_max(diff, lo, hi, KS_REFINE_TOL))
}

/// Golden-section maximization; returns the best value observed.
fn golden_section_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    if !(hi > lo) {
        return f(lo);
    }
    let inv_phi = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut best = f1.max(f2).max(f(lo)).max(f(hi));
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
        best = best.max(f1).max(f2);
    }
    best
}

/// 1-Wasserstein distance between two empirical distributions: the integral
/// of `|F_A - F_B|` over the merged support. For equal sample sizes this
/// equals the mean absolute difference of sorted samples.
pub fn wasserstein_1d(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::domain("wasserstein_1d requires nonempty samples"));
    }
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);

    let mut merged: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    merged.sort_by(f64::total_cmp);
    merged.dedup();

    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut total = 0.0;
    for w in merged.windows(2) {
        while ia < a.len() && a[ia] <= w[0] {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= w[0] {
            ib += 1;
        }
        total += (ia as f64 / na - ib as f64 / nb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

/// Per-feature Wasserstein distances between the full population and each
/// estimator's included (non-abstained) subset, plus the feature with the
/// largest mean distance across estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureShiftReport {
    pub feature_names: Vec<String>,
    /// (estimator name, distance per feature)
    pub per_estimator: Vec<(String, Vec<f64>)>,
    pub mean_distance: Vec<f64>,
    pub argmax_feature: String,
}

pub fn feature_shift_report(
    dataset: &Dataset,
    included_masks: &[(String, Vec<bool>)],
) -> Result<FeatureShiftReport> {
    if included_masks.is_empty() {
        return Err(Error::domain("feature shift requires at least one mask"));
    }
    let d = dataset.n_features();
    let mut per_estimator = Vec::with_capacity(included_masks.len());
    for (name, mask) in included_masks {
        if mask.len() != dataset.n_rows() {
            return Err(Error::domain("mask length must match dataset rows"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::domain("included set is empty"));
        }
        let mut distances = Vec::with_capacity(d);
        for j in 0..d {
            let col = dataset.feature_column(j);
            let included: Vec<f64> = col
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .collect();
            distances.push(wasserstein_1d(col, &included)?);
        }
        per_estimator.push((name.clone(), distances));
    }
    let mean_distance: Vec<f64> = (0..d)
        .map(|j| {
            per_estimator.iter().map(|(_, v)| v[j]).sum::<f64>() / per_estimator.len() as f64
        })
        .collect();
    let argmax = mean_distance
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(j, _)| j)
        .unwrap_or(0);
    Ok(FeatureShiftReport {
        feature_names: dataset.feature_names().to_vec(),
        per_estimator,
        mean_distance,
        argmax_feature: dataset.feature_names()[argmax].clone(),
    })
}
